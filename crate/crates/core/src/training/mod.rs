//! Losses, AdamW, the learning-rate schedule, and the pre-training,
//! fine-tuning and probing loops.

mod checkpoint;
mod finetune;
mod loss;
mod optim;
mod pretrain;
mod schedule;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
pub use finetune::{evaluate, finetune, linear_probe, FinetuneOutcome, LabeledClip, Source};
pub use loss::{masked_mse, masked_mse_loss};
pub use optim::{adamw_step, AdamW, OptimState};
pub use pretrain::{pretrain, restore_mae, PretrainOutcome, Pretrainer};
pub use schedule::{cosine_warmup_lr, scaled_lr};

use crate::config::{ConfigMap, Section};
use crate::error::{Error, Result};
use crate::masking::MaskStrategy;

/// Epsilon added to the per-cube standard deviation of reconstruction targets.
pub const TARGET_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Pretrain,
    Finetune,
    Probe,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
            Mode::Probe => "probe",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Mode::Pretrain),
            "finetune" => Ok(Mode::Finetune),
            "probe" => Ok(Mode::Probe),
            _ => Err(Error::config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Learning rate at batch size 256; the peak is [`scaled_lr`] of this.
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_floor: f64,
    /// Per-layer multiplicative lr factor for fine-tuning; 1 disables it.
    pub layer_decay: f64,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Random horizontal flips during pre-training.
    pub flip: bool,
    /// Keep encoder parameters fixed while fine-tuning.
    pub freeze_encoder: bool,
}

impl TrainConfig {
    /// Pre-training defaults sized for the desk model.
    pub fn pretrain() -> Self {
        TrainConfig {
            mode: Mode::Pretrain,
            base_lr: 0.08,
            batch_size: 8,
            warmup_epochs: 4.0,
            total_epochs: 32.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            lr_floor: 1e-6,
            layer_decay: 1.0,
            mask_strategy: MaskStrategy::Tube,
            mask_ratio: 0.9,
            seed: 0,
            flip: false,
            freeze_encoder: false,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            mode: Mode::Finetune,
            base_lr: 0.08,
            warmup_epochs: 2.0,
            total_epochs: 40.0,
            beta2: 0.999,
            layer_decay: 1.0,
            ..Self::pretrain()
        }
    }

    /// Head-only training: no weight decay, no layer decay.
    pub fn probe() -> Self {
        TrainConfig {
            mode: Mode::Probe,
            base_lr: 0.32,
            warmup_epochs: 1.0,
            total_epochs: 24.0,
            weight_decay: 0.0,
            beta2: 0.999,
            layer_decay: 1.0,
            freeze_encoder: true,
            ..Self::pretrain()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Pretrain => Self::pretrain(),
            Mode::Finetune => Self::finetune(),
            Mode::Probe => Self::probe(),
        }
    }

    pub fn peak_lr(&self) -> f64 {
        scaled_lr(self.base_lr, self.batch_size)
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        (self.total_epochs * self.steps_per_epoch(dataset_len) as f64).round() as u64
    }

    /// Learning rate for the update that brings the step counter to `step`.
    pub fn lr_at(&self, step: u64, dataset_len: usize) -> f64 {
        cosine_warmup_lr(
            step,
            self.steps_per_epoch(dataset_len),
            self.warmup_epochs,
            self.total_epochs,
            self.peak_lr(),
            self.lr_floor,
        )
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs) {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be in [0, total_epochs ({}))",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr >= 0.0 && self.lr_floor >= 0.0) {
            return Err(Error::config("learning rates must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.layer_decay >= 0.0) {
            return Err(Error::config(
                "eps must be positive; weight_decay and layer_decay non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

impl Section for TrainConfig {
    fn read(m: &mut ConfigMap, p: &str, d: Self) -> Result<Self> {
        let k = |key: &str| format!("{p}.{key}");
        let cfg = TrainConfig {
            mode: d.mode,
            base_lr: m.get_or(&k("base_lr"), d.base_lr)?,
            batch_size: m.get_or(&k("batch_size"), d.batch_size)?,
            warmup_epochs: m.get_or(&k("warmup_epochs"), d.warmup_epochs)?,
            total_epochs: m.get_or(&k("total_epochs"), d.total_epochs)?,
            weight_decay: m.get_or(&k("weight_decay"), d.weight_decay)?,
            beta1: m.get_or(&k("beta1"), d.beta1)?,
            beta2: m.get_or(&k("beta2"), d.beta2)?,
            eps: m.get_or(&k("eps"), d.eps)?,
            lr_floor: m.get_or(&k("lr_floor"), d.lr_floor)?,
            layer_decay: m.get_or(&k("layer_decay"), d.layer_decay)?,
            mask_strategy: m.get_or(&k("mask_strategy"), d.mask_strategy)?,
            mask_ratio: m.get_or(&k("mask_ratio"), d.mask_ratio)?,
            seed: m.get_or(&k("seed"), d.seed)?,
            flip: m.get_or(&k("flip"), d.flip)?,
            freeze_encoder: m.get_or(&k("freeze_encoder"), d.freeze_encoder)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn write(&self, m: &mut ConfigMap, p: &str) {
        let k = |key: &str| format!("{p}.{key}");
        m.set(&k("base_lr"), self.base_lr);
        m.set(&k("batch_size"), self.batch_size);
        m.set(&k("warmup_epochs"), self.warmup_epochs);
        m.set(&k("total_epochs"), self.total_epochs);
        m.set(&k("weight_decay"), self.weight_decay);
        m.set(&k("beta1"), self.beta1);
        m.set(&k("beta2"), self.beta2);
        m.set(&k("eps"), self.eps);
        m.set(&k("lr_floor"), self.lr_floor);
        m.set(&k("layer_decay"), self.layer_decay);
        m.set(&k("mask_strategy"), self.mask_strategy);
        m.set(&k("mask_ratio"), self.mask_ratio);
        m.set(&k("seed"), self.seed);
        m.set(&k("flip"), self.flip);
        m.set(&k("freeze_encoder"), self.freeze_encoder);
    }
}

/// One row of a loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Renders a loss trace as `step,lr,loss` CSV.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
    }
    out
}
