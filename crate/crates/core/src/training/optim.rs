use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments per parameter, indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<R> {
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub step: u64,
}

impl<R: Real> OptimState<R> {
    pub fn new(store: &ParamStore<R>) -> Self {
        let zeros: Vec<Tensor<R>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    fn check(&self, store: &ParamStore<R>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::dim(format!(
                "optimizer state for {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if self.m[id.0].shape() != p.value.shape() || self.v[id.0].shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "optimizer moments for `{}` do not match {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// One AdamW update. Weight decay is decoupled and applied first, only to
/// parameters flagged for decay. `lr_scale[i]` multiplies the rate of
/// parameter `i`; a zero scale leaves that parameter and its moments alone,
/// as does a missing gradient. Non-finite gradients abort before anything
/// changes.
pub fn adamw_step<R: Real>(
    store: &mut ParamStore<R>,
    grads: &Gradients<R>,
    state: &mut OptimState<R>,
    opt: &AdamW,
    lr: f64,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::config(format!("learning rate {lr} is negative")));
    }
    state.check(store)?;
    for (id, g) in grads.iter() {
        if id.0 >= store.len() {
            return Err(Error::dim(format!("gradient for unknown parameter {}", id.0)));
        }
        if g.shape() != store.value(id).shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for `{}` of shape {:?}",
                g.shape(),
                store.get(id).name,
                store.value(id).shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for `{}`",
                store.get(id).name
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2) = (R::lit(opt.beta1), R::lit(opt.beta2));
    let (one_b1, one_b2) = (R::lit(1.0 - opt.beta1), R::lit(1.0 - opt.beta2));
    let eps = R::lit(opt.eps);

    for (id, g) in grads.iter() {
        let scale = lr_scale.map_or(1.0, |s| s[id.0]);
        if scale == 0.0 {
            continue;
        }
        let lr_p = lr * scale;
        let p = store.get_mut(id);
        if p.decay && opt.weight_decay != 0.0 {
            let keep = R::lit(1.0 - lr_p * opt.weight_decay);
            p.value.data_mut().iter_mut().for_each(|w| *w = *w * keep);
        }
        let step_size = R::lit(lr_p / bc1);
        let inv_bc2 = R::lit(1.0 / bc2);
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn store() -> (ParamStore<f64>, ParamId, ParamId) {
        let mut s = ParamStore::new();
        let w = s.add("w", Tensor::new(&[2], vec![1.0, -2.0]).unwrap(), true);
        let b = s.add("b", Tensor::new(&[1], vec![3.0]).unwrap(), false);
        (s, w, b)
    }

    fn grads(w: ParamId, b: ParamId, gw: [f64; 2], gb: f64) -> Gradients<f64> {
        let mut g = Gradients::new();
        g.add(w, &Tensor::new(&[2], gw.to_vec()).unwrap());
        g.add(b, &Tensor::new(&[1], vec![gb]).unwrap());
        g
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let mut st = OptimState::new(&s);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..3 {
            adamw_step(&mut s, &grads(w, b, [0.0; 2], 0.0), &mut st, &opt, 0.1, None).unwrap();
        }
        assert_eq!(s.value(w), before.value(w));
        assert_eq!(s.value(b), before.value(b));
    }

    #[test]
    fn decay_only_scales_weights() {
        let (mut s, w, b) = store();
        let mut st = OptimState::new(&s);
        let opt = AdamW {
            weight_decay: 0.05,
            ..AdamW::default()
        };
        adamw_step(&mut s, &grads(w, b, [0.0; 2], 0.0), &mut st, &opt, 0.1, None).unwrap();
        assert_eq!(s.value(w).data(), &[0.995, -2.0 * 0.995]);
        assert_eq!(s.value(b).data(), &[3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let p = s.add("p", Tensor::scalar(0.0), false);
        let mut st = OptimState::new(&s);
        let mut g = Gradients::new();
        g.add(p, &Tensor::scalar(1.0));
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        adamw_step(&mut s, &g, &mut st, &opt, 0.01, None).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((s.value(p).item() - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let mut st = OptimState::new(&s);
        adamw_step(&mut s, &grads(w, b, [0.3, -1.0], 2.0), &mut st, &AdamW::default(), 0.0, None)
            .unwrap();
        assert_eq!(s.value(w), before.value(w));
        assert_eq!(s.value(b), before.value(b));
    }

    #[test]
    fn non_finite_grad_aborts_untouched() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let mut st = OptimState::new(&s);
        let err = adamw_step(
            &mut s,
            &grads(w, b, [f64::NAN, 0.0], 1.0),
            &mut st,
            &AdamW::default(),
            0.1,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(st.step, 0);
        assert_eq!(s.value(w), before.value(w));
        assert_eq!(s.value(b), before.value(b));
    }

    #[test]
    fn zero_scale_freezes() {
        let (mut s, w, b) = store();
        let before = s.clone();
        let mut st = OptimState::new(&s);
        adamw_step(
            &mut s,
            &grads(w, b, [1.0, 1.0], 1.0),
            &mut st,
            &AdamW::default(),
            0.1,
            Some(&[0.0, 1.0]),
        )
        .unwrap();
        assert_eq!(s.value(w), before.value(w));
        assert_ne!(s.value(b), before.value(b));
        assert!(st.m[w.0].data().iter().all(|&v| v == 0.0));
    }
}
