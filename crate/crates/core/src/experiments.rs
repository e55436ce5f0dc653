//! Ablation harness: masking strategy, masking ratio, decoder depth and
//! pre-training data size, each cell a full pre-train then fine-tune run on
//! synthetic sprites.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::config::{ConfigMap, Section};
use crate::error::{Error, Result};
use crate::masking::{generate_mask, leakage_probe, visible_tokens, MaskStrategy};
use crate::model::ModelConfig;
use crate::seed::{derive_seed, derived_rng};
use crate::training::{finetune, pretrain, LabeledClip, Source, TrainConfig};
use crate::video::{synth_moving_sprites, synth_static_textures, SpriteConfig, VideoClip, CUBE_DIM};

const DATA: u64 = 0xda7a;
const LEAK: u64 = 0x1ea4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Strategy,
    Ratio,
    DecoderDepth,
    DatasetFraction,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Strategy => "strategy",
            Axis::Ratio => "ratio",
            Axis::DecoderDepth => "decoder_depth",
            Axis::DatasetFraction => "dataset_fraction",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strategy" => Ok(Axis::Strategy),
            "ratio" => Ok(Axis::Ratio),
            "decoder_depth" => Ok(Axis::DecoderDepth),
            "dataset_fraction" => Ok(Axis::DatasetFraction),
            _ => Err(Error::config(format!("unknown ablation axis `{s}`"))),
        }
    }
}

/// How a smaller pre-training set is compensated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Same number of passes over the (smaller) data.
    SameEpochs,
    /// Same number of optimizer steps as the full data would take.
    SameIterations,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::SameEpochs => "same-epochs",
            Regime::SameIterations => "same-iterations",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same-epochs" => Ok(Regime::SameEpochs),
            "same-iterations" => Ok(Regime::SameIterations),
            _ => Err(Error::config(format!("unknown regime `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Moving sprites labeled by direction.
    Sprites,
    /// Static oriented stripes; a control with no motion.
    Textures,
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataKind::Sprites => "sprites",
            DataKind::Textures => "textures",
        })
    }
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sprites" => Ok(DataKind::Sprites),
            "textures" => Ok(DataKind::Textures),
            _ => Err(Error::config(format!("unknown dataset `{s}`"))),
        }
    }
}

/// Synthetic data for one cell: unlabeled pre-training clips plus labeled
/// training and held-out sets, all derived from the cell seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub kind: DataKind,
    pub clip: SpriteConfig,
    pub pretrain_clips: usize,
    pub train_clips: usize,
    pub eval_clips: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            kind: DataKind::Sprites,
            clip: SpriteConfig {
                sprite_size: 24,
                ..SpriteConfig::default()
            },
            pretrain_clips: 128,
            train_clips: 64,
            eval_clips: 128,
        }
    }
}

/// Materialized datasets of one seed.
pub struct CellData {
    pub pretrain: Vec<VideoClip>,
    pub train: Vec<LabeledClip>,
    pub eval: Vec<LabeledClip>,
}

impl DataSpec {
    pub fn generate(&self, seed: u64) -> Result<CellData> {
        let gen = |part: u64, count: usize| {
            let s = derive_seed(seed, &[DATA, part]);
            match self.kind {
                DataKind::Sprites => synth_moving_sprites(s, count, &self.clip),
                DataKind::Textures => synth_static_textures(s, count, &self.clip),
            }
            .map(|d| d.items)
        };
        Ok(CellData {
            pretrain: gen(0, self.pretrain_clips)?.into_iter().map(|(c, _)| c).collect(),
            train: gen(1, self.train_clips)?,
            eval: gen(2, self.eval_clips)?,
        })
    }
}

impl Section for DataSpec {
    fn read(m: &mut ConfigMap, p: &str, d: Self) -> Result<Self> {
        Ok(DataSpec {
            kind: m.get_or(&format!("{p}.kind"), d.kind)?,
            pretrain_clips: m.get_or(&format!("{p}.pretrain_clips"), d.pretrain_clips)?,
            train_clips: m.get_or(&format!("{p}.train_clips"), d.train_clips)?,
            eval_clips: m.get_or(&format!("{p}.eval_clips"), d.eval_clips)?,
            clip: SpriteConfig::read(m, &format!("{p}.clip"), d.clip)?,
        })
    }

    fn write(&self, m: &mut ConfigMap, p: &str) {
        m.set(&format!("{p}.kind"), self.kind);
        m.set(&format!("{p}.pretrain_clips"), self.pretrain_clips);
        m.set(&format!("{p}.train_clips"), self.train_clips);
        m.set(&format!("{p}.eval_clips"), self.eval_clips);
        self.clip.write(m, &format!("{p}.clip"));
    }
}

/// Settings shared by every cell before the axis value is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct CellBase {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub data: DataSpec,
}

impl Default for CellBase {
    fn default() -> Self {
        CellBase {
            model: ModelConfig::desk(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            data: DataSpec::default(),
        }
    }
}

impl Section for CellBase {
    fn read(m: &mut ConfigMap, _p: &str, d: Self) -> Result<Self> {
        Ok(CellBase {
            model: ModelConfig::read(m, "model", d.model)?,
            pretrain: TrainConfig::read(m, "pretrain", d.pretrain)?,
            finetune: TrainConfig::read(m, "finetune", d.finetune)?,
            data: DataSpec::read(m, "data", d.data)?,
        })
    }

    fn write(&self, m: &mut ConfigMap, _p: &str) {
        self.model.write(m, "model");
        self.pretrain.write(m, "pretrain");
        self.finetune.write(m, "finetune");
        self.data.write(m, "data");
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub axis: Axis,
    /// Grid values as written in the report, e.g. `tube` or `0.75`.
    pub values: Vec<String>,
    pub seeds: Vec<u64>,
    pub base: CellBase,
    pub regime: Regime,
}

impl AblationSpec {
    pub fn new(axis: Axis, values: &[&str], seeds: &[u64], base: CellBase) -> Self {
        AblationSpec {
            axis,
            values: values.iter().map(|v| v.to_string()).collect(),
            seeds: seeds.to_vec(),
            base,
            regime: Regime::SameEpochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("an ablation needs at least one value and one seed"));
        }
        for v in &self.values {
            CellPlan::build(&self.base, self.axis, v, self.regime, 0)?;
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.values.len() * self.seeds.len()
    }
}

impl Section for AblationSpec {
    fn read(m: &mut ConfigMap, p: &str, d: Self) -> Result<Self> {
        let list = |raw: String| -> Vec<String> {
            raw.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
        };
        let values = list(m.get_or(&format!("{p}.values"), d.values.join(","))?);
        let seeds = list(m.get_or(
            &format!("{p}.seeds"),
            d.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        )?)
        .iter()
        .map(|s| s.parse().map_err(|_| Error::config(format!("`{p}.seeds`: bad seed `{s}`"))))
        .collect::<Result<_>>()?;
        let spec = AblationSpec {
            axis: m.get_or(&format!("{p}.axis"), d.axis)?,
            regime: m.get_or(&format!("{p}.regime"), d.regime)?,
            values,
            seeds,
            base: CellBase::read(m, "", d.base)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn write(&self, m: &mut ConfigMap, p: &str) {
        m.set(&format!("{p}.axis"), self.axis);
        m.set(&format!("{p}.regime"), self.regime);
        m.set(&format!("{p}.values"), self.values.join(","));
        m.set(
            &format!("{p}.seeds"),
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        );
        self.base.write(m, "");
    }
}

/// Concrete configuration of one cell.
#[derive(Clone, Debug)]
struct CellPlan {
    model: ModelConfig,
    pretrain: TrainConfig,
    finetune: TrainConfig,
    fraction: f64,
}

impl CellPlan {
    fn build(base: &CellBase, axis: Axis, value: &str, regime: Regime, seed: u64) -> Result<Self> {
        let bad = || Error::config(format!("bad {axis} value `{value}`"));
        let mut plan = CellPlan {
            model: base.model.clone(),
            pretrain: TrainConfig {
                seed,
                ..base.pretrain.clone()
            },
            finetune: TrainConfig {
                seed,
                ..base.finetune.clone()
            },
            fraction: 1.0,
        };
        match axis {
            Axis::Strategy => plan.pretrain.mask_strategy = value.parse().map_err(|_| bad())?,
            Axis::Ratio => {
                let r: f64 = value.parse().map_err(|_| bad())?;
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::config(format!("ratio {r} outside (0, 1)")));
                }
                plan.pretrain.mask_ratio = r;
            }
            Axis::DecoderDepth => {
                let d: usize = value.parse().map_err(|_| bad())?;
                if d == 0 {
                    return Err(Error::config("decoder depth must be at least 1"));
                }
                plan.model.depth_dec = d;
            }
            Axis::DatasetFraction => {
                let f: f64 = value.parse().map_err(|_| bad())?;
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config(format!("dataset fraction {f} outside (0, 1]")));
                }
                plan.fraction = f;
                if regime == Regime::SameIterations {
                    let full = base.data.pretrain_clips;
                    let part = subset_len(full, f);
                    let scale = plan.pretrain.steps_per_epoch(full) as f64
                        / plan.pretrain.steps_per_epoch(part) as f64;
                    plan.pretrain.total_epochs *= scale;
                    plan.pretrain.warmup_epochs *= scale;
                }
            }
        }
        plan.model.validate()?;
        plan.pretrain.validate()?;
        Ok(plan)
    }
}

fn subset_len(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.max(1))
}

/// Number of activations one decoder pass stores, per clip: the scattered
/// input, then per block the two norms, qkv, attention weights, attention
/// output and projection, the MLP hidden layer before and after GELU, and the
/// MLP output, and finally the predictions.
pub fn decoder_activation_count(model: &ModelConfig) -> usize {
    let n = model.grid.tokens();
    let d = model.d_dec;
    let hidden = d * model.mlp_ratio;
    let per_block = n * (2 * d + 3 * d + 2 * d + 2 * hidden + d) + model.heads_dec * n * n;
    n * d + model.depth_dec * per_block + n * CUBE_DIM
}

/// One `(value, seed)` result. The CSV carries the first eight fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub accuracy: f64,
    pub final_pretrain_loss: f64,
    pub leakage: f64,
    pub visible_tokens: usize,
    pub wall_seconds: f64,
    pub pretrain_steps: u64,
    pub pretrain_epochs: f64,
    pub decoder_activations: usize,
}

pub const CSV_HEADER: &str =
    "axis,value,seed,accuracy,final_pretrain_loss,leakage,visible_tokens,wall_seconds";

impl ReportRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.4},{},{:.3}",
            self.axis,
            self.value,
            self.seed,
            self.accuracy,
            self.final_pretrain_loss,
            self.leakage,
            self.visible_tokens,
            self.wall_seconds
        )
    }
}

/// Mean and sample standard deviation of accuracy for one grid value.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub value: String,
    pub seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_final_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    /// Per-value summaries in first-appearance order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.value.as_str()) {
                order.push(&r.value);
            }
        }
        order
            .into_iter()
            .map(|v| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.value == v).collect();
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
                let var = if rows.len() > 1 {
                    rows.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                CellSummary {
                    value: v.to_string(),
                    seeds: rows.len(),
                    mean,
                    std: var.sqrt(),
                    mean_final_loss: rows.iter().map(|r| r.final_pretrain_loss).sum::<f64>() / n,
                }
            })
            .collect()
    }

    pub fn mean_accuracy(&self, value: &str) -> Option<f64> {
        self.summary().into_iter().find(|s| s.value == value).map(|s| s.mean)
    }

    /// Human-readable table including the columns the CSV leaves out.
    pub fn table(&self) -> String {
        let mut out = String::from("value      seeds  acc mean  acc std  final loss  visible  dec acts  epochs\n");
        for s in self.summary() {
            let r = self.rows.iter().find(|r| r.value == s.value).unwrap();
            out.push_str(&format!(
                "{:<10} {:>5}  {:>8.4}  {:>7.4}  {:>10.4}  {:>7}  {:>8}  {:>6.1}\n",
                s.value,
                s.seeds,
                s.mean,
                s.std,
                s.mean_final_loss,
                r.visible_tokens,
                r.decoder_activations,
                r.pretrain_epochs
            ));
        }
        out
    }

    /// Merges into a CSV file: rows with the same `(axis, value, seed)` are
    /// replaced, everything else is kept in place.
    pub fn append_csv(&self, path: &Path) -> Result<()> {
        let mut lines: Vec<String> = match std::fs::read_to_string(path) {
            Ok(text) => {
                let mut it = text.lines();
                match it.next() {
                    Some(h) if h == CSV_HEADER => it.map(str::to_string).collect(),
                    Some(h) => {
                        return Err(Error::config(format!(
                            "{}: unexpected header `{h}`",
                            path.display()
                        )))
                    }
                    None => Vec::new(),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        let key = |line: &str| line.splitn(4, ',').take(3).collect::<Vec<_>>().join(",");
        for r in &self.rows {
            let new = r.csv();
            match lines.iter().position(|l| key(l) == key(&new)) {
                Some(i) => lines[i] = new,
                None => lines.push(new),
            }
        }
        let mut text = format!("{CSV_HEADER}\n");
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn mean_leakage(strategy: MaskStrategy, model: &ModelConfig, ratio: f64, seed: u64) -> Result<f64> {
    let mut rng = derived_rng(seed, &[LEAK]);
    let draws = 200;
    let mut total = 0.0;
    for _ in 0..draws {
        total += leakage_probe(&generate_mask(strategy, model.grid, ratio, &mut rng)?);
    }
    Ok(total / draws as f64)
}

/// Mean loss over the last tenth of the trace.
fn tail_loss(trace: &[crate::training::TraceRow]) -> f64 {
    let k = (trace.len() / 10).max(1).min(trace.len());
    trace[trace.len() - k..].iter().map(|r| r.loss).sum::<f64>() / k as f64
}

/// Pre-trains and fine-tunes one cell.
pub fn run_cell(spec: &AblationSpec, value: &str, seed: u64) -> Result<ReportRow> {
    let start = Instant::now();
    let plan = CellPlan::build(&spec.base, spec.axis, value, spec.regime, seed)?;
    let data = spec.base.data.generate(seed)?;
    let n = subset_len(data.pretrain.len(), plan.fraction);
    let clips = &data.pretrain[..n];
    let pre = pretrain(&plan.model, &plan.pretrain, clips)?;
    let ft = finetune(Source::Pretrained(&pre.checkpoint), &data.train, &data.eval, &plan.finetune)?;
    let p = &plan.pretrain;
    let axis = match (spec.axis, spec.regime) {
        (Axis::DatasetFraction, r) => format!("{}:{r}", spec.axis),
        (a, _) => a.to_string(),
    };
    Ok(ReportRow {
        axis,
        value: value.to_string(),
        seed,
        accuracy: ft.accuracy,
        final_pretrain_loss: tail_loss(&pre.trace),
        leakage: mean_leakage(p.mask_strategy, &plan.model, p.mask_ratio, seed)?,
        visible_tokens: visible_tokens(p.mask_strategy, plan.model.grid, p.mask_ratio),
        wall_seconds: start.elapsed().as_secs_f64(),
        pretrain_steps: pre.trace.len() as u64,
        pretrain_epochs: p.total_epochs,
        decoder_activations: decoder_activation_count(&plan.model),
    })
}

/// Fine-tunes from a fresh encoder on the same data a cell with this seed
/// would use. Reported under axis `init`, value `scratch`.
pub fn run_scratch_cell(base: &CellBase, seed: u64) -> Result<ReportRow> {
    let start = Instant::now();
    let data = base.data.generate(seed)?;
    let cfg = TrainConfig {
        seed,
        ..base.finetune.clone()
    };
    let ft = finetune(Source::Scratch(&base.model), &data.train, &data.eval, &cfg)?;
    Ok(ReportRow {
        axis: "init".into(),
        value: "scratch".into(),
        seed,
        accuracy: ft.accuracy,
        final_pretrain_loss: f64::NAN,
        leakage: f64::NAN,
        visible_tokens: base.model.grid.tokens(),
        wall_seconds: start.elapsed().as_secs_f64(),
        pretrain_steps: 0,
        pretrain_epochs: 0.0,
        decoder_activations: 0,
    })
}

/// Runs every `(value, seed)` cell, in parallel where workers are available.
/// Rows come back in grid order regardless of scheduling.
pub fn run_ablation(spec: &AblationSpec) -> Result<Report> {
    spec.validate()?;
    let cells: Vec<(&str, u64)> = spec
        .values
        .iter()
        .flat_map(|v| spec.seeds.iter().map(move |&s| (v.as_str(), s)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(v, s)| run_cell(spec, v, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { rows })
}

fn expect_axis(spec: &AblationSpec, axis: Axis) -> Result<()> {
    if spec.axis != axis {
        return Err(Error::config(format!(
            "expected a {axis} ablation, got {}",
            spec.axis
        )));
    }
    Ok(())
}

pub fn run_strategy_ablation(spec: &AblationSpec) -> Result<Report> {
    expect_axis(spec, Axis::Strategy)?;
    run_ablation(spec)
}

pub fn run_ratio_sweep(spec: &AblationSpec) -> Result<Report> {
    expect_axis(spec, Axis::Ratio)?;
    run_ablation(spec)
}

pub fn run_decoder_depth_sweep(spec: &AblationSpec) -> Result<Report> {
    expect_axis(spec, Axis::DecoderDepth)?;
    run_ablation(spec)
}

pub fn run_data_efficiency_sweep(spec: &AblationSpec) -> Result<Report> {
    expect_axis(spec, Axis::DatasetFraction)?;
    run_ablation(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::GridDims;

    fn tiny_base() -> CellBase {
        CellBase {
            model: ModelConfig {
                d_enc: 16,
                depth_enc: 1,
                heads_enc: 2,
                d_dec: 8,
                depth_dec: 1,
                heads_dec: 2,
                mlp_ratio: 2,
                grid: GridDims::new(2, 2, 2),
                num_classes: 4,
            },
            pretrain: TrainConfig {
                batch_size: 4,
                warmup_epochs: 0.0,
                total_epochs: 1.0,
                mask_ratio: 0.75,
                ..TrainConfig::pretrain()
            },
            finetune: TrainConfig {
                batch_size: 4,
                warmup_epochs: 0.0,
                total_epochs: 1.0,
                ..TrainConfig::finetune()
            },
            data: DataSpec {
                kind: DataKind::Sprites,
                clip: SpriteConfig {
                    frames: 4,
                    height: 32,
                    width: 32,
                    sprite_size: 8,
                    speed: 2,
                    ..Default::default()
                },
                pretrain_clips: 8,
                train_clips: 4,
                eval_clips: 4,
            },
        }
    }

    #[test]
    fn single_cell_gives_one_row() {
        let spec = AblationSpec::new(Axis::Strategy, &["tube"], &[1], tiny_base());
        let report = run_strategy_ablation(&spec).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].leakage, 0.0);
        assert_eq!(report.summary().len(), 1);
    }

    #[test]
    fn rerun_reproduces_everything_but_time() {
        let spec = AblationSpec::new(Axis::Ratio, &["0.5", "0.75"], &[3], tiny_base());
        let a = run_ratio_sweep(&spec).unwrap();
        let b = run_ratio_sweep(&spec).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(
                ReportRow { wall_seconds: 0.0, ..x.clone() },
                ReportRow { wall_seconds: 0.0, ..y.clone() }
            );
        }
        assert_eq!(a.rows[0].visible_tokens, 4);
        assert_eq!(a.rows[1].visible_tokens, 2);
    }

    #[test]
    fn visible_token_column_on_desk_grid() {
        let g = ModelConfig::desk().grid;
        assert_eq!(visible_tokens(MaskStrategy::Tube, g, 0.5), 64);
        assert_eq!(visible_tokens(MaskStrategy::Tube, g, 0.75), 32);
        assert_eq!(visible_tokens(MaskStrategy::Tube, g, 0.9), 16);
        assert_eq!(visible_tokens(MaskStrategy::Random, g, 0.9), 13);
    }

    #[test]
    fn activation_count_is_linear_in_depth() {
        let at = |d| {
            decoder_activation_count(&ModelConfig {
                depth_dec: d,
                ..ModelConfig::desk()
            })
        };
        let step = at(2) - at(1);
        assert!(step > 0);
        assert_eq!(at(4) - at(2), 2 * step);
    }

    #[test]
    fn same_iterations_scales_epochs() {
        let base = CellBase {
            data: DataSpec {
                pretrain_clips: 64,
                ..tiny_base().data
            },
            pretrain: TrainConfig {
                batch_size: 8,
                total_epochs: 4.0,
                warmup_epochs: 1.0,
                ..TrainConfig::pretrain()
            },
            ..tiny_base()
        };
        let full_steps = base.pretrain.total_steps(64);
        for regime in [Regime::SameEpochs, Regime::SameIterations] {
            let p = CellPlan::build(&base, Axis::DatasetFraction, "1.0", regime, 0).unwrap();
            assert_eq!(p.pretrain.total_steps(64), full_steps);
        }
        let p = CellPlan::build(&base, Axis::DatasetFraction, "0.25", Regime::SameIterations, 0).unwrap();
        assert_eq!(p.pretrain.total_epochs, 16.0);
        assert_eq!(p.pretrain.total_steps(16), full_steps);
        // epochs = iterations * batch / size
        assert_eq!(full_steps as f64 * 8.0 / 16.0, p.pretrain.total_epochs);
        let p = CellPlan::build(&base, Axis::DatasetFraction, "0.25", Regime::SameEpochs, 0).unwrap();
        assert_eq!(p.pretrain.total_epochs, 4.0);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for (axis, v) in [
            (Axis::Ratio, "1.0"),
            (Axis::Strategy, "checkerboard"),
            (Axis::DecoderDepth, "0"),
            (Axis::DatasetFraction, "0"),
        ] {
            let spec = AblationSpec::new(axis, &[v], &[0], tiny_base());
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{axis} {v}");
        }
        let spec = AblationSpec::new(Axis::Ratio, &["0.5"], &[0], tiny_base());
        assert!(run_strategy_ablation(&spec).is_err());
    }

    #[test]
    fn csv_merge_replaces_same_cell() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let row = |value: &str, seed, acc| ReportRow {
            axis: "ratio".into(),
            value: value.into(),
            seed,
            accuracy: acc,
            final_pretrain_loss: 0.5,
            leakage: 0.0,
            visible_tokens: 16,
            wall_seconds: 1.0,
            pretrain_steps: 1,
            pretrain_epochs: 1.0,
            decoder_activations: 1,
        };
        Report { rows: vec![row("0.5", 0, 0.1), row("0.9", 0, 0.2)] }.append_csv(&path).unwrap();
        Report { rows: vec![row("0.5", 0, 0.3), row("0.5", 1, 0.4)] }.append_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("ratio,0.5,0,0.300000"));
        assert!(lines[2].starts_with("ratio,0.9,0,0.200000"));
        assert!(lines[3].starts_with("ratio,0.5,1,0.400000"));
    }

    #[test]
    fn spec_section_round_trip() {
        let spec = AblationSpec {
            regime: Regime::SameIterations,
            ..AblationSpec::new(Axis::DatasetFraction, &["0.25", "1"], &[1, 2, 3], tiny_base())
        };
        let mut m = ConfigMap::new();
        spec.write(&mut m, "ablate");
        let back = AblationSpec::read(&mut m, "ablate", AblationSpec::new(Axis::Ratio, &["0.5"], &[0], CellBase::default())).unwrap();
        assert_eq!(back, spec);
        m.finish().unwrap();
    }
}
