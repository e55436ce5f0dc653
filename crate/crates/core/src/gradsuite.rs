//! Finite-difference checks of every tape primitive and of the full model
//! losses, in f64.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::masking::{generate_mask, MaskStrategy};
use crate::model::{Classifier, MaeModel, ModelConfig};
use crate::seed::derived_rng;
use crate::tensor::{
    attention_block, finite_diff_check, BlockParams, GradCheckReport, GradCheckSpec, ParamStore,
    Tape, Tensor, Var,
};
use crate::training::{masked_mse_loss, TARGET_EPS};
use crate::video::{normalize_cube_targets, CubeGrid, CUBE_DIM};

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.report.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Reduces `x` to a scalar through a fixed random weighting, so every output
/// coordinate contributes a distinct amount.
fn project(tape: &mut Tape<f64>, x: Var, rng: &mut impl Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(normal(&shape, 1.0, rng));
    let y = tape.mul(x, w)?;
    Ok(tape.sum(y))
}

type Case = (&'static str, Vec<(&'static str, Vec<usize>)>, fn(&mut Tape<f64>, &[Var]) -> Result<Var>);

fn cases() -> Vec<Case> {
    vec![
        ("matmul", vec![("a", vec![3, 4]), ("b", vec![4, 5])], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![("a", vec![3, 4]), ("b", vec![5, 4])], |t, v| t.matmul_nt(v[0], v[1])),
        ("matmul_tn", vec![("a", vec![4, 3]), ("b", vec![4, 5])], |t, v| {
            t.matmul_ext(v[0], v[1], true, false)
        }),
        ("add", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |t, v| t.add(v[0], v[1])),
        ("sub", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![("a", vec![3, 4]), ("b", vec![3, 4])], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![("a", vec![3, 4])], |t, v| Ok(t.scale(v[0], -1.7))),
        ("square", vec![("a", vec![3, 4])], |t, v| Ok(t.square(v[0]))),
        ("add_row", vec![("x", vec![3, 4]), ("bias", vec![4])], |t, v| t.add_row(v[0], v[1])),
        (
            "layer_norm",
            vec![("x", vec![3, 6]), ("gamma", vec![6]), ("beta", vec![6])],
            |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
        ),
        ("gelu", vec![("x", vec![4, 5])], |t, v| Ok(t.gelu(v[0]))),
        ("softmax", vec![("x", vec![3, 5])], |t, v| Ok(t.softmax(v[0]))),
        ("sum", vec![("x", vec![3, 4])], |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![("x", vec![3, 4])], |t, v| Ok(t.mean(v[0]))),
        ("mean_rows", vec![("x", vec![3, 4])], |t, v| Ok(t.mean_rows(v[0]))),
        ("cols", vec![("x", vec![3, 6])], |t, v| t.cols(v[0], 2, 3)),
        ("concat_cols", vec![("a", vec![3, 2]), ("b", vec![3, 4])], |t, v| {
            t.concat_cols(&[v[0], v[1]])
        }),
        ("concat_rows", vec![("a", vec![2, 3]), ("b", vec![4, 3])], |t, v| {
            t.concat_rows(&[v[0], v[1]])
        }),
        ("gather_rows", vec![("x", vec![4, 3])], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2])),
        ("reshape", vec![("x", vec![3, 4])], |t, v| t.reshape(v[0], &[2, 6])),
        ("cross_entropy", vec![("logits", vec![1, 5])], |t, v| t.cross_entropy(v[0], 3)),
    ]
}

/// Checks each primitive at a random point with every coordinate perturbed.
pub fn primitive_suite(spec: &GradCheckSpec) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for (i, (name, inputs, op)) in cases().into_iter().enumerate() {
        let mut rng = derived_rng(spec.seed, &[0x9c, i as u64]);
        let mut store = ParamStore::new();
        for (pname, shape) in &inputs {
            store.add(*pname, normal(shape, 1.0, &mut rng), true);
        }
        let proj_seed = rng.gen::<u64>();
        let ids: Vec<_> = store.ids().collect();
        let report = finite_diff_check(
            |t, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
                let y = op(t, &vars)?;
                project(t, y, &mut derived_rng(proj_seed, &[]))
            },
            &mut store,
            &GradCheckSpec {
                coords_per_param: None,
                ..spec.clone()
            },
        )?;
        out.push(SuiteEntry { name: name.to_string(), report });
    }

    let mut rng = derived_rng(spec.seed, &[0x9c, 0xb10c]);
    let mut store = ParamStore::new();
    let block = BlockParams::new(&mut store, "block", 8, 2, 2, &mut rng)?;
    jitter(&mut store, &mut rng);
    let x = normal(&[5, 8], 1.0, &mut rng);
    let proj_seed = rng.gen::<u64>();
    let report = finite_diff_check(
        |t, s| {
            let xv = t.constant(x.clone());
            let y = attention_block(t, s, xv, &block)?;
            project(t, y, &mut derived_rng(proj_seed, &[]))
        },
        &mut store,
        &GradCheckSpec {
            coords_per_param: None,
            ..spec.clone()
        },
    )?;
    out.push(SuiteEntry { name: "attention_block".into(), report });
    Ok(out)
}

/// Moves parameters to a generic, well-conditioned point: matrices get
/// fan-in scaled noise and vectors unit-scale noise, so gradients through the
/// whole network stay far above rounding error and none vanish by symmetry.
fn jitter(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let std = match shape.as_slice() {
            [rows, _] => 1.0 / (*rows as f64).sqrt(),
            _ => 0.5,
        };
        let noise = normal(&shape, std, rng);
        p.value.add_assign(&noise);
    }
}

fn random_grid(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<CubeGrid> {
    let n = cfg.grid.tokens();
    let data = (0..n * CUBE_DIM).map(|_| rng.gen::<f32>()).collect();
    CubeGrid::new(Tensor::new(&[n, CUBE_DIM], data)?, cfg.grid)
}

/// Checks the masked reconstruction loss of a full MAE forward pass and the
/// classification loss of the fine-tuning model, sampling
/// `spec.coords_per_param` coordinates per tensor.
pub fn model_suite(cfg: &ModelConfig, spec: &GradCheckSpec) -> Result<Vec<SuiteEntry>> {
    let mut rng = derived_rng(spec.seed, &[0x9d]);
    let grid = random_grid(cfg, &mut rng)?;
    let target = normalize_cube_targets(&grid, TARGET_EPS);
    let mut out = Vec::new();

    for strategy in MaskStrategy::ALL {
        let mask = generate_mask(strategy, cfg.grid, 0.5, &mut rng)?;
        let mut store = ParamStore::new();
        let model = MaeModel::init(cfg, &mut store, &mut rng)?;
        jitter(&mut store, &mut rng);
        let report = finite_diff_check(
            |t, s| {
                let o = model.forward(t, s, &grid, &mask)?;
                masked_mse_loss(t, o.pred, &target, &mask)
            },
            &mut store,
            spec,
        )?;
        out.push(SuiteEntry {
            name: format!("mae_forward[{strategy}]"),
            report,
        });
    }

    let mut store = ParamStore::new();
    let clf = Classifier::init(cfg, &mut store, &mut rng)?;
    jitter(&mut store, &mut rng);
    let label = rng.gen_range(0..cfg.num_classes);
    let report = finite_diff_check(
        |t, s| {
            let logits = clf.classify(t, s, &grid)?;
            t.cross_entropy(logits, label)
        },
        &mut store,
        spec,
    )?;
    out.push(SuiteEntry { name: "classifier".into(), report });
    Ok(out)
}

/// Primitives plus model losses.
pub fn gradient_suite(cfg: &ModelConfig, spec: &GradCheckSpec) -> Result<SuiteReport> {
    let mut entries = primitive_suite(spec)?;
    entries.extend(model_suite(cfg, spec)?);
    Ok(SuiteReport { entries })
}

/// Defaults for the suite: `h = 1e-5` and four sampled coordinates per
/// model tensor.
pub fn default_spec(seed: u64) -> GradCheckSpec {
    GradCheckSpec {
        h: 1e-5,
        coords_per_param: Some(4),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::GridDims;

    #[test]
    fn primitives_pass() {
        let entries = primitive_suite(&default_spec(0)).unwrap();
        assert_eq!(entries.len(), cases().len() + 1);
        for e in &entries {
            assert!(e.report.max_rel_error < 1e-4, "{}: {}", e.name, e.report.max_rel_error);
        }
    }

    #[test]
    fn small_model_passes() {
        let cfg = ModelConfig {
            d_enc: 8,
            depth_enc: 1,
            heads_enc: 2,
            d_dec: 4,
            depth_dec: 1,
            heads_dec: 1,
            mlp_ratio: 2,
            grid: GridDims::new(2, 2, 2),
            num_classes: 3,
        };
        let r = model_suite(&cfg, &default_spec(1)).unwrap();
        assert_eq!(r.len(), 4);
        for e in &r {
            assert!(e.report.max_rel_error < 1e-4, "{}: {}", e.name, e.report.max_rel_error);
        }
    }
}
