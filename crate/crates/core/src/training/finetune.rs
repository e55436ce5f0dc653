use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, CheckpointKind};
use super::optim::{adamw_step, OptimState};
use super::{Mode, TraceRow, TrainConfig};
use crate::config::{ConfigMap, Section};
use crate::error::{Error, Result};
use crate::model::{Classifier, ModelConfig};
use crate::seed::derived_rng;
use crate::tensor::{Gradients, ParamStore, Tape, Tensor};
use crate::video::{cubify, CubeGrid, VideoClip};

const HEAD_INIT: u64 = 0x11;
const EPOCH: u64 = 0x12;

/// A clip and its class index.
pub type LabeledClip = (VideoClip, usize);

/// Where the encoder weights come from.
#[derive(Clone, Copy, Debug)]
pub enum Source<'a> {
    /// Encoder copied from a pre-training checkpoint.
    Pretrained(&'a Checkpoint),
    /// Fresh initialization with this geometry.
    Scratch(&'a ModelConfig),
}

pub struct FinetuneOutcome {
    /// Held-out accuracy after the last step.
    pub accuracy: f64,
    pub classifier: Classifier,
    pub store: ParamStore<f32>,
    pub trace: Vec<TraceRow>,
    pub checkpoint: Checkpoint,
}

fn grids(clips: &[LabeledClip], model: &ModelConfig, what: &str) -> Result<Vec<(CubeGrid, usize)>> {
    clips
        .iter()
        .map(|(clip, label)| {
            let grid = cubify(clip).map_err(|e| Error::config(format!("{what} clip geometry: {e}")))?;
            if grid.dims != model.grid {
                return Err(Error::config(format!(
                    "{what} clip grid {} does not match model grid {}",
                    grid.dims, model.grid
                )));
            }
            if *label >= model.num_classes {
                return Err(Error::config(format!(
                    "label {label} with only {} classes",
                    model.num_classes
                )));
            }
            Ok((grid, *label))
        })
        .collect()
}

fn build(source: Source, seed: u64) -> Result<(Classifier, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = derived_rng(seed, &[HEAD_INIT]);
    let clf = match source {
        Source::Scratch(cfg) => Classifier::init(cfg, &mut store, &mut rng)?,
        Source::Pretrained(ckpt) => {
            if ckpt.kind != CheckpointKind::Mae {
                return Err(Error::config(format!(
                    "expected a mae checkpoint, got {}",
                    ckpt.kind
                )));
            }
            let mut snapshot = ckpt.config.clone();
            let cfg = ModelConfig::read(&mut snapshot, "model", ModelConfig::desk())?;
            Classifier::from_pretrained(&cfg, &ckpt.params, &mut store, &mut rng)?
        }
    };
    Ok((clf, store))
}

fn lr_scales(clf: &Classifier, store: &ParamStore<f32>, cfg: &TrainConfig) -> Vec<f64> {
    let top = clf.config.depth_enc + 1;
    store
        .iter()
        .map(|(_, p)| {
            if cfg.freeze_encoder && p.name.starts_with("encoder.") {
                0.0
            } else if cfg.mode == Mode::Probe {
                1.0
            } else {
                cfg.layer_decay.powi((top - clf.layer_of(&p.name)) as i32)
            }
        })
        .collect()
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of clips whose highest logit is the true class.
pub fn evaluate(clf: &Classifier, store: &ParamStore<f32>, clips: &[LabeledClip]) -> Result<f64> {
    let data = grids(clips, &clf.config, "evaluation")?;
    let hits = data
        .par_iter()
        .map(|(grid, label)| {
            let mut tape = Tape::new();
            let logits = clf.classify(&mut tape, store, grid)?;
            Ok(usize::from(argmax(tape.value(logits).data()) == *label))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Shared loop: `item` returns the loss and gradients of one example.
fn train_loop<F>(
    cfg: &TrainConfig,
    n: usize,
    store: &mut ParamStore<f32>,
    scales: &[f64],
    item: F,
) -> Result<Vec<TraceRow>>
where
    F: Fn(&ParamStore<f32>, usize) -> Result<(f64, Gradients<f32>)> + Sync,
{
    let mut optim = OptimState::new(store);
    let spe = cfg.steps_per_epoch(n) as u64;
    let total = cfg.total_steps(n);
    let mut trace = Vec::with_capacity(total as usize);
    let mut perm: Vec<usize> = Vec::new();
    for step in 0..total {
        if step % spe == 0 {
            perm = (0..n).collect();
            perm.shuffle(&mut derived_rng(cfg.seed, &[EPOCH, step / spe]));
        }
        let start = (step % spe) as usize * cfg.batch_size;
        let batch = &perm[start..(start + cfg.batch_size).min(n)];
        let frozen: &ParamStore<f32> = store;
        let results: Vec<_> = batch.par_iter().map(|&i| item(frozen, i)).collect();
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
        let lr = cfg.lr_at(step + 1, n);
        adamw_step(store, &grads, &mut optim, &cfg.adamw(), lr, Some(scales))?;
        trace.push(TraceRow {
            step: step + 1,
            lr,
            loss,
        });
    }
    Ok(trace)
}

fn outcome(
    clf: Classifier,
    store: ParamStore<f32>,
    trace: Vec<TraceRow>,
    eval: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let accuracy = evaluate(&clf, &store, eval)?;
    let mut snapshot = ConfigMap::new();
    clf.config.write(&mut snapshot, "model");
    cfg.write(&mut snapshot, cfg.mode.name());
    let checkpoint = Checkpoint {
        kind: CheckpointKind::Classifier,
        step: trace.len() as u64,
        seed: cfg.seed,
        config: snapshot,
        optim: OptimState::new(&store),
        params: store.clone(),
    };
    Ok(FinetuneOutcome {
        accuracy,
        classifier: clf,
        store,
        trace,
        checkpoint,
    })
}

/// Cross-entropy training of encoder and head; the decoder is dropped.
/// Encoder layers get `layer_decay^(distance from the head)` times the
/// scheduled rate.
pub fn finetune(
    source: Source,
    train: &[LabeledClip],
    eval: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("fine-tuning needs at least one labeled clip"));
    }
    let (clf, mut store) = build(source, cfg.seed)?;
    let data = grids(train, &clf.config, "training")?;
    grids(eval, &clf.config, "evaluation")?;
    let scales = lr_scales(&clf, &store, cfg);
    let trace = train_loop(cfg, data.len(), &mut store, &scales, |store, i| {
        let (grid, label) = &data[i];
        let mut tape = Tape::new();
        let logits = clf.classify(&mut tape, store, grid)?;
        let loss = tape.cross_entropy(logits, *label)?;
        Ok((tape.value(loss).item() as f64, tape.backward(loss)?))
    })?;
    outcome(clf, store, trace, eval, cfg)
}

/// Trains only the head on frozen encoder features. Features are computed
/// once; the encoder parameters are never written.
pub fn linear_probe(
    source: Source,
    train: &[LabeledClip],
    eval: &[LabeledClip],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::config("probing needs at least one labeled clip"));
    }
    let cfg = TrainConfig {
        freeze_encoder: true,
        ..cfg.clone()
    };
    let (clf, mut store) = build(source, cfg.seed)?;
    let data = grids(train, &clf.config, "training")?;
    grids(eval, &clf.config, "evaluation")?;
    let features: Vec<(Tensor<f32>, usize)> = data
        .par_iter()
        .map(|(grid, label)| {
            let mut tape = Tape::new();
            let f = clf.features(&mut tape, &store, grid)?;
            Ok((tape.value(f).clone(), *label))
        })
        .collect::<Result<_>>()?;
    let scales = lr_scales(&clf, &store, &cfg);
    let trace = train_loop(&cfg, features.len(), &mut store, &scales, |store, i| {
        let (f, label) = &features[i];
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let logits = clf.head(&mut tape, store, x)?;
        let loss = tape.cross_entropy(logits, *label)?;
        Ok((tape.value(loss).item() as f64, tape.backward(loss)?))
    })?;
    outcome(clf, store, trace, eval, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{synth_moving_sprites, GridDims, SpriteConfig};

    fn sprites(seed: u64, n: usize) -> Vec<LabeledClip> {
        let cfg = SpriteConfig {
            frames: 4,
            height: 32,
            width: 32,
            sprite_size: 8,
            speed: 3,
            ..Default::default()
        };
        synth_moving_sprites(seed, n, &cfg).unwrap().items
    }

    fn model() -> ModelConfig {
        ModelConfig {
            d_enc: 16,
            depth_enc: 2,
            heads_enc: 2,
            d_dec: 8,
            depth_dec: 1,
            heads_dec: 2,
            mlp_ratio: 2,
            grid: GridDims::new(2, 2, 2),
            num_classes: 4,
        }
    }

    fn cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            warmup_epochs: 1.0,
            total_epochs: 4.0,
            seed: 2,
            ..TrainConfig::for_mode(mode)
        }
    }

    #[test]
    fn probe_leaves_encoder_bitwise_unchanged() {
        let m = model();
        let (_, init) = build(Source::Scratch(&m), 2).unwrap();
        let out = linear_probe(Source::Scratch(&m), &sprites(1, 8), &sprites(2, 8), &cfg(Mode::Probe)).unwrap();
        for (id, p) in out.store.iter() {
            if p.name.starts_with("encoder.") {
                assert_eq!(&p.value, init.value(id), "{}", p.name);
            } else {
                assert_ne!(&p.value, init.value(id), "{}", p.name);
            }
        }
    }

    #[test]
    fn frozen_finetune_equals_probe() {
        let m = model();
        let (train, eval) = (sprites(1, 8), sprites(2, 8));
        let probe = linear_probe(Source::Scratch(&m), &train, &eval, &cfg(Mode::Probe)).unwrap();
        let ft_cfg = TrainConfig {
            mode: Mode::Finetune,
            freeze_encoder: true,
            ..cfg(Mode::Probe)
        };
        let ft = finetune(Source::Scratch(&m), &train, &eval, &ft_cfg).unwrap();
        assert_eq!(ft.trace, probe.trace);
        assert_eq!(ft.accuracy, probe.accuracy);
    }

    #[test]
    fn layer_decay_scales() {
        let m = model();
        let (clf, store) = build(Source::Scratch(&m), 0).unwrap();
        let decayed = TrainConfig {
            layer_decay: 0.75,
            ..TrainConfig::finetune()
        };
        let scales = lr_scales(&clf, &store, &decayed);
        let of = |name: &str| scales[store.find(name).unwrap().0];
        assert_eq!(of("head.linear.weight"), 1.0);
        assert_eq!(of("encoder.blocks.1.qkv.weight"), 0.75);
        assert_eq!(of("encoder.blocks.0.qkv.weight"), 0.75 * 0.75);
        assert_eq!(of("encoder.embed.weight"), 0.75f64.powi(3));
        let probe = lr_scales(&clf, &store, &TrainConfig::probe());
        assert!(store
            .iter()
            .all(|(id, p)| probe[id.0] == if p.name.starts_with("head.") { 1.0 } else { 0.0 }));
    }

    #[test]
    fn geometry_mismatch_is_config_error() {
        let mut m = model();
        m.grid = GridDims::new(2, 4, 4);
        let err = finetune(Source::Scratch(&m), &sprites(1, 4), &sprites(2, 4), &cfg(Mode::Finetune))
            .err()
            .unwrap();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn pretrained_source_loads_encoder() {
        let m = model();
        let clips: Vec<VideoClip> = sprites(1, 4).into_iter().map(|(c, _)| c).collect();
        let pre_cfg = TrainConfig {
            batch_size: 2,
            warmup_epochs: 0.0,
            total_epochs: 1.0,
            mask_ratio: 0.5,
            ..TrainConfig::pretrain()
        };
        let pre = super::super::pretrain(&m, &pre_cfg, &clips).unwrap();
        let (_, store) = build(Source::Pretrained(&pre.checkpoint), 9).unwrap();
        let id = store.find("encoder.embed.weight").unwrap();
        let src = pre.store.find("encoder.embed.weight").unwrap();
        assert_eq!(store.value(id), pre.store.value(src));
        assert!(store.find("decoder.out.weight").is_none());
    }
}
