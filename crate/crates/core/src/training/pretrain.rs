use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::loss::masked_mse_loss;
use super::optim::{adamw_step, OptimState};
use super::{TraceRow, TrainConfig, TARGET_EPS};
use crate::config::{ConfigMap, Section};
use crate::error::{Error, Result};
use crate::masking::generate_mask;
use crate::model::{MaeModel, ModelConfig};
use crate::seed::derived_rng;
use crate::tensor::{Gradients, ParamStore, Tape};
use crate::video::{cubify, normalize_cube_targets, CubeGrid, TargetCubes, VideoClip};

// Stream tags for derived_rng.
const INIT: u64 = 0x1;
const EPOCH: u64 = 0x2;
const ITEM: u64 = 0x3;

struct Prepared {
    grid: CubeGrid,
    target: TargetCubes,
    flipped: Option<(CubeGrid, TargetCubes)>,
}

fn prepare(clip: &VideoClip, model: &ModelConfig, flip: bool) -> Result<Prepared> {
    let one = |c: &VideoClip| -> Result<(CubeGrid, TargetCubes)> {
        let grid = cubify(c).map_err(|e| Error::config(format!("clip geometry: {e}")))?;
        if grid.dims != model.grid {
            return Err(Error::config(format!(
                "clip grid {} does not match model grid {}",
                grid.dims, model.grid
            )));
        }
        let target = normalize_cube_targets(&grid, TARGET_EPS);
        Ok((grid, target))
    };
    let (grid, target) = one(clip)?;
    let flipped = if flip {
        Some(one(&clip.flip_horizontal())?)
    } else {
        None
    };
    Ok(Prepared {
        grid,
        target,
        flipped,
    })
}

/// Masked-autoencoder pre-training state. Every random draw comes from
/// `(seed, step, item)`, so a run restored from a checkpoint continues
/// exactly as if it had never stopped.
pub struct Pretrainer {
    pub config: TrainConfig,
    pub model: MaeModel,
    pub store: ParamStore<f32>,
    pub optim: OptimState<f32>,
    pub step: u64,
    /// Rows produced by this process; a resumed run starts empty.
    pub trace: Vec<TraceRow>,
    data: Vec<Prepared>,
    order: Option<(u64, Vec<usize>)>,
}

impl Pretrainer {
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, clips: &[VideoClip]) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = MaeModel::init(model_config, &mut store, &mut derived_rng(config.seed, &[INIT]))?;
        let optim = OptimState::new(&store);
        Self::assemble(model, store, optim, 0, config.clone(), clips)
    }

    fn assemble(
        model: MaeModel,
        store: ParamStore<f32>,
        optim: OptimState<f32>,
        step: u64,
        config: TrainConfig,
        clips: &[VideoClip],
    ) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::config("pre-training needs at least one clip"));
        }
        let data = clips
            .iter()
            .map(|c| prepare(c, &model.config, config.flip))
            .collect::<Result<_>>()?;
        Ok(Pretrainer {
            config,
            model,
            store,
            optim,
            step,
            trace: Vec::new(),
            data,
            order: None,
        })
    }

    /// Restores parameters, moments, step and configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint, clips: &[VideoClip]) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Mae {
            return Err(Error::config(format!("expected a mae checkpoint, got {}", ckpt.kind)));
        }
        let mut snapshot = ckpt.config.clone();
        let model_config = ModelConfig::read(&mut snapshot, "model", ModelConfig::desk())?;
        let mut config = TrainConfig::read(&mut snapshot, "pretrain", TrainConfig::pretrain())?;
        config.seed = ckpt.seed;
        let mut store = ParamStore::new();
        let model = MaeModel::init(&model_config, &mut store, &mut derived_rng(0, &[INIT]))?;
        let optim = adopt(&mut store, &ckpt.params, &ckpt.optim)?;
        Self::assemble(model, store, optim, ckpt.step, config, clips)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps(self.data.len())
    }

    fn batch(&mut self) -> Vec<usize> {
        let n = self.data.len();
        let spe = self.config.steps_per_epoch(n) as u64;
        let epoch = self.step / spe;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut derived_rng(self.config.seed, &[EPOCH, epoch]));
            self.order = Some((epoch, perm));
        }
        let perm = &self.order.as_ref().unwrap().1;
        let b = self.config.batch_size;
        let start = (self.step % spe) as usize * b;
        perm[start..(start + b).min(n)].to_vec()
    }

    /// One optimizer update. On a non-finite loss the state is left exactly
    /// as it was before the call.
    pub fn step(&mut self) -> Result<TraceRow> {
        let batch = self.batch();
        let step = self.step;
        let (cfg, model, store, data) = (&self.config, &self.model, &self.store, &self.data);
        let results: Vec<Result<(f64, Gradients<f32>)>> = batch
            .par_iter()
            .map(|&idx| {
                let mut rng = derived_rng(cfg.seed, &[ITEM, step, idx as u64]);
                let mask = generate_mask(cfg.mask_strategy, model.config.grid, cfg.mask_ratio, &mut rng)?;
                let item = &data[idx];
                let (grid, target) = match &item.flipped {
                    Some((g, t)) if rng.gen_bool(0.5) => (g, t),
                    _ => (&item.grid, &item.target),
                };
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, store, grid, &mask)?;
                let loss = masked_mse_loss(&mut tape, out.pred, target, &mask)?;
                let value = tape.value(loss).item() as f64;
                Ok((value, tape.backward(loss)?))
            })
            .collect();
        let mut grads = Gradients::new();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.merge(&g);
        }
        let b = batch.len() as f64;
        loss /= b;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at step {}", step + 1)));
        }
        grads.scale((1.0 / b) as f32);
        let lr = cfg.lr_at(step + 1, data.len());
        adamw_step(&mut self.store, &grads, &mut self.optim, &cfg.adamw(), lr, None)?;
        self.step += 1;
        let row = TraceRow {
            step: self.step,
            lr,
            loss,
        };
        self.trace.push(row);
        Ok(row)
    }

    /// Steps until the counter reaches `target`, reporting each row.
    pub fn run_until(&mut self, target: u64, mut on_step: impl FnMut(&TraceRow)) -> Result<()> {
        while self.step < target {
            let row = self.step()?;
            on_step(&row);
        }
        Ok(())
    }

    /// Resolved configuration: `model.*` and `pretrain.*`.
    pub fn config_snapshot(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        self.model.config.write(&mut m, "model");
        self.config.write(&mut m, "pretrain");
        m
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Mae,
            step: self.step,
            seed: self.config.seed,
            config: self.config_snapshot(),
            params: self.store.clone(),
            optim: self.optim.clone(),
        }
    }
}

/// Copies saved values into a freshly built store by name and reorders the
/// saved moments to match it.
pub(crate) fn adopt(
    store: &mut ParamStore<f32>,
    saved: &ParamStore<f32>,
    saved_optim: &OptimState<f32>,
) -> Result<OptimState<f32>> {
    if saved.len() != store.len() {
        return Err(Error::config(format!(
            "checkpoint holds {} tensors, model expects {}",
            saved.len(),
            store.len()
        )));
    }
    let mut optim = OptimState::new(store);
    optim.step = saved_optim.step;
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        let src = saved
            .find(&name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks `{name}`")))?;
        let value = saved.value(src);
        if value.shape() != store.value(id).shape() {
            return Err(Error::config(format!(
                "`{name}` is {:?} in the checkpoint, {:?} in the model",
                value.shape(),
                store.value(id).shape()
            )));
        }
        store.get_mut(id).value = value.clone();
        optim.m[id.0] = saved_optim.m[src.0].clone();
        optim.v[id.0] = saved_optim.v[src.0].clone();
    }
    Ok(optim)
}

/// Rebuilds the autoencoder and its parameters from a pre-training checkpoint.
pub fn restore_mae(ckpt: &Checkpoint) -> Result<(MaeModel, ParamStore<f32>)> {
    if ckpt.kind != CheckpointKind::Mae {
        return Err(Error::config(format!("expected a mae checkpoint, got {}", ckpt.kind)));
    }
    let mut snapshot = ckpt.config.clone();
    let model_config = ModelConfig::read(&mut snapshot, "model", ModelConfig::desk())?;
    let mut store = ParamStore::new();
    let model = MaeModel::init(&model_config, &mut store, &mut derived_rng(0, &[INIT]))?;
    adopt(&mut store, &ckpt.params, &ckpt.optim)?;
    Ok((model, store))
}

/// Result of a complete pre-training run.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub model: MaeModel,
    pub store: ParamStore<f32>,
}

/// Pre-trains for the configured number of epochs. A non-finite loss stops
/// the run with a numeric error; use [`Pretrainer`] directly to keep the last
/// good state.
pub fn pretrain(
    model_config: &ModelConfig,
    config: &TrainConfig,
    clips: &[VideoClip],
) -> Result<PretrainOutcome> {
    let mut t = Pretrainer::new(model_config, config, clips)?;
    let total = t.total_steps();
    t.run_until(total, |_| {})?;
    Ok(PretrainOutcome {
        checkpoint: t.checkpoint(),
        trace: t.trace,
        model: t.model,
        store: t.store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use crate::video::{synth_moving_sprites, SpriteConfig};

    fn tiny() -> (ModelConfig, Vec<VideoClip>) {
        let cfg = SpriteConfig {
            frames: 4,
            height: 32,
            width: 32,
            sprite_size: 8,
            speed: 2,
            ..Default::default()
        };
        let clips = synth_moving_sprites(3, 3, &cfg)
            .unwrap()
            .items
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        let model = ModelConfig {
            d_enc: 16,
            depth_enc: 1,
            heads_enc: 2,
            d_dec: 8,
            depth_dec: 1,
            heads_dec: 2,
            mlp_ratio: 2,
            grid: crate::video::GridDims::new(2, 2, 2),
            num_classes: 4,
        };
        (model, clips)
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            warmup_epochs: 1.0,
            total_epochs: 3.0,
            mask_ratio: 0.5,
            seed: 5,
            flip: true,
            ..TrainConfig::pretrain()
        }
    }

    #[test]
    fn one_step_moves_every_parameter() {
        let (model, clips) = tiny();
        let cfg = TrainConfig {
            warmup_epochs: 0.0,
            ..train_cfg()
        };
        let mut t = Pretrainer::new(&model, &cfg, &clips).unwrap();
        let before = t.store.clone();
        t.step().unwrap();
        for (id, p) in t.store.iter() {
            assert_ne!(&p.value, before.value(id), "{} did not move", p.name);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let (model, clips) = tiny();
        let a = pretrain(&model, &train_cfg(), &clips).unwrap();
        let b = pretrain(&model, &train_cfg(), &clips).unwrap();
        assert_eq!(a.trace.len(), 6);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        let c = pretrain(&model, &TrainConfig { seed: 6, ..train_cfg() }, &clips).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (model, clips) = tiny();
        let full = pretrain(&model, &train_cfg(), &clips).unwrap();
        let mut first = Pretrainer::new(&model, &train_cfg(), &clips).unwrap();
        first.run_until(3, |_| {}).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Pretrainer::from_checkpoint(&ckpt, &clips).unwrap();
        second.run_until(6, |_| {}).unwrap();
        assert_eq!(second.trace, full.trace[3..]);
        assert_eq!(second.checkpoint().to_bytes(), full.checkpoint.to_bytes());
    }

    #[test]
    fn wrong_geometry_is_config_error() {
        let (mut model, clips) = tiny();
        model.grid = crate::video::GridDims::new(2, 1, 1);
        let err = Pretrainer::new(&model, &train_cfg(), &clips).err().unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn frame_masking_trains() {
        let (model, clips) = tiny();
        let cfg = TrainConfig {
            mask_strategy: MaskStrategy::Frame,
            ..train_cfg()
        };
        let out = pretrain(&model, &cfg, &clips).unwrap();
        assert!(out.trace.iter().all(|r| r.loss.is_finite() && r.loss > 0.0));
    }

    #[test]
    fn nan_aborts_and_keeps_state() {
        let (model, clips) = tiny();
        let mut t = Pretrainer::new(&model, &train_cfg(), &clips).unwrap();
        t.step().unwrap();
        let good = t.checkpoint();
        let id = t.store.find("decoder.out.bias").unwrap();
        t.store.get_mut(id).value.data_mut()[0] = f32::NAN;
        let err = t.step().unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert_eq!(t.step, good.step);
        assert_eq!(t.optim, good.optim);
    }
}
