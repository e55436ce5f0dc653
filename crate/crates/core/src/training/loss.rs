use crate::error::{Error, Result};
use crate::masking::MaskMap;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::video::TargetCubes;

fn check<R: Real>(pred_shape: &[usize], target: &TargetCubes, mask: &MaskMap) -> Result<Vec<usize>> {
    if pred_shape != target.values.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} vs target {:?}",
            pred_shape,
            target.values.shape()
        )));
    }
    if mask.len() != pred_shape[0] {
        return Err(Error::dim(format!(
            "mask over {} tokens, prediction has {} rows",
            mask.len(),
            pred_shape[0]
        )));
    }
    let omega = mask.masked_indices();
    if omega.is_empty() {
        return Err(Error::Contract("reconstruction loss over an empty mask".into()));
    }
    Ok(omega)
}

/// Mean squared error over the masked tokens, averaged over each token's
/// entries as well. Visible rows never reach the loss.
pub fn masked_mse_loss<R: Real>(
    tape: &mut Tape<R>,
    pred: Var,
    target: &TargetCubes,
    mask: &MaskMap,
) -> Result<Var> {
    let omega = check::<R>(tape.shape(pred), target, mask)?;
    let width = target.values.shape()[1];
    let picked = tape.gather_rows(pred, &omega)?;
    let mut rows = Vec::with_capacity(omega.len() * width);
    for &i in &omega {
        rows.extend(target.values.row(i).iter().map(|&v| R::lit(v as f64)));
    }
    let goal = tape.constant(Tensor::new(&[omega.len(), width], rows)?);
    let diff = tape.sub(picked, goal)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Value-only form of [`masked_mse_loss`].
pub fn masked_mse<R: Real>(pred: &Tensor<R>, target: &TargetCubes, mask: &MaskMap) -> Result<f64> {
    let omega = check::<R>(pred.shape(), target, mask)?;
    let mut total = 0.0;
    for &i in &omega {
        let per_token: f64 = pred
            .row(i)
            .iter()
            .zip(target.values.row(i))
            .map(|(&p, &t)| {
                let d = p.to_f64().unwrap() - t as f64;
                d * d
            })
            .sum();
        total += per_token / pred.row(i).len() as f64;
    }
    Ok(total / omega.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;

    fn target(rows: usize, width: usize, f: impl Fn(usize) -> f32) -> TargetCubes {
        TargetCubes {
            values: Tensor::new(&[rows, width], (0..rows * width).map(f).collect()).unwrap(),
            mean: vec![0.0; rows],
            std: vec![1.0; rows],
            eps: 0.0,
        }
    }

    fn mask(bits: &[bool]) -> MaskMap {
        MaskMap::from_bools(1, bits.len(), 0.5, MaskStrategy::Random, bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = target(4, 6, |i| i as f32 * 0.1);
        let mut tape = Tape::<f64>::new();
        let pred = tape.constant(t.values.cast());
        let l = masked_mse_loss(&mut tape, pred, &t, &mask(&[true, false, true, false])).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn constant_offset_gives_square() {
        let t = target(3, 5, |i| i as f32);
        let pred = Tensor::<f64>::new(
            &[3, 5],
            t.values.data().iter().map(|&v| v as f64 + 0.5).collect(),
        )
        .unwrap();
        let m = mask(&[false, true, false]);
        assert!((masked_mse(&pred, &t, &m).unwrap() - 0.25).abs() < 1e-15);
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(pred);
        let l = masked_mse_loss(&mut tape, p, &t, &m).unwrap();
        assert!((tape.value(l).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn visible_rows_get_no_gradient() {
        let t = target(3, 2, |_| 1.0);
        let mut store = crate::tensor::ParamStore::<f64>::new();
        let id = store.add("pred", Tensor::zeros(&[3, 2]), false);
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let l = masked_mse_loss(&mut tape, p, &t, &mask(&[true, false, false])).unwrap();
        let g = tape.backward(l).unwrap();
        // d/dp mean((p-1)^2) over 2 entries = (p-1) = -1
        assert_eq!(g.get(id).unwrap().data(), &[-1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_mask_is_contract_error() {
        let t = target(2, 2, |_| 0.0);
        let pred = Tensor::<f32>::zeros(&[2, 2]);
        assert!(matches!(
            masked_mse(&pred, &t, &mask(&[false, false])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn shape_mismatch() {
        let t = target(2, 2, |_| 0.0);
        let pred = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(
            masked_mse(&pred, &t, &mask(&[true, false])),
            Err(Error::Dimension(_))
        ));
    }
}
