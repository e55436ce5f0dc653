use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckSpec {
    pub h: f64,
    /// Check at most this many coordinates per parameter tensor, chosen at
    /// random; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            h: 1e-5,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_analytic: f64,
    pub max_numeric: f64,
    pub coords: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function evaluated to {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of the scalar `f` against central differences.
///
/// Relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6 · max(1, |f|))`.
/// The floor keeps coordinates whose true gradient is zero (a key bias under
/// softmax, for instance) from dividing rounding noise by nothing. The report
/// carries the maximum overall and per parameter.
pub fn finite_diff_check<F>(
    f: F,
    point: &mut ParamStore<f64>,
    spec: &GradCheckSpec,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(spec.h > 0.0) {
        return Err(Error::config(format!("step h must be positive, got {}", spec.h)));
    }
    let (grads, floor) = {
        let mut tape = Tape::new();
        let out = f(&mut tape, point)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(Error::Numeric("function is not finite at the check point".into()));
        }
        (tape.backward(out)?, 1e-6 * value.abs().max(1.0))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ids: Vec<ParamId> = point.ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        params: Vec::with_capacity(ids.len()),
    };
    for id in ids {
        let n = point.value(id).len();
        let coords: Vec<usize> = match spec.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: point.get(id).name.clone(),
            max_rel_error: 0.0,
            max_analytic: 0.0,
            max_numeric: 0.0,
            coords: coords.len(),
        };
        for c in coords {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[c]);
            let orig = point.value(id).data()[c];
            point.get_mut(id).value.data_mut()[c] = orig + spec.h;
            let plus = evaluate(&f, point);
            point.get_mut(id).value.data_mut()[c] = orig - spec.h;
            let minus = evaluate(&f, point);
            point.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * spec.h);
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = (analytic - numeric).abs() / denom;
            check.max_rel_error = check.max_rel_error.max(rel);
            check.max_analytic = check.max_analytic.max(analytic.abs());
            check.max_numeric = check.max_numeric.max(numeric.abs());
        }
        report.max_rel_error = report.max_rel_error.max(check.max_rel_error);
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap(), true);
        let r = finite_diff_check(
            |t, s| {
                let p = t.param(s, ParamId(0));
                let q = t.square(p);
                let q = t.scale(q, 3.0);
                Ok(t.sum(q))
            },
            &mut s,
            &GradCheckSpec::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn dead_param_reports_zero() {
        let mut s = ParamStore::new();
        s.add("live", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), true);
        s.add("dead", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap(), true);
        let r = finite_diff_check(
            |t, s| {
                let p = t.param(s, ParamId(0));
                Ok(t.sum(p))
            },
            &mut s,
            &GradCheckSpec::default(),
        )
        .unwrap();
        let dead = &r.params[1];
        assert_eq!(dead.max_analytic, 0.0);
        assert_eq!(dead.max_numeric, 0.0);
        assert_eq!(dead.max_rel_error, 0.0);
    }

    #[test]
    fn gelu_composite() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[4], &[-1.3, 0.2, 0.9, 2.5]).unwrap(), true);
        let r = finite_diff_check(
            |t, s| {
                let p = t.param(s, ParamId(0));
                let g = t.gelu(p);
                let g = t.mul(g, p)?;
                let g = t.gelu(g);
                Ok(t.sum(g))
            },
            &mut s,
            &GradCheckSpec::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_f64(&[1], &[0.0]).unwrap(), true);
        let err = finite_diff_check(
            |t, s| {
                let p = t.param(s, ParamId(0));
                let big = t.constant(Tensor::from_f64(&[1], &[f64::INFINITY]).unwrap());
                let v = t.mul(p, big)?;
                Ok(t.sum(v))
            },
            &mut s,
            &GradCheckSpec::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn rejects_bad_step() {
        let mut s = ParamStore::<f64>::new();
        s.add("p", Tensor::zeros(&[1]), true);
        let spec = GradCheckSpec {
            h: 0.0,
            ..Default::default()
        };
        assert!(finite_diff_check(|t, s| Ok(t.param(s, ParamId(0))), &mut s, &spec).is_err());
    }
}
