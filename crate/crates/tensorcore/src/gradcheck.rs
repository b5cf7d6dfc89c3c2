//! Central finite-difference gradient checking.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

fn evaluate<F>(build: &F, point: &[Tensor], with_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(with_grad))).collect();
    let loss = build(&mut tape, &leaves)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::NonScalar { shape: tape.value(loss).shape().to_vec() });
    }
    Ok((tape, leaves, loss))
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over every coordinate of
/// every leaf in `point`, where `build` maps the leaves to a scalar.
///
/// `h` is rounded to the nearest power of two so the perturbation itself adds
/// no rounding error.
pub fn gradcheck<F>(build: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::invalid(format!("gradcheck step must be positive, got {h}")));
    }
    let h = 2f64.powi(h.log2().round() as i32);
    let (tape, leaves, loss) = evaluate(&build, point, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(point)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (li, leaf_grad) in analytic.iter().enumerate() {
        for (ci, &a) in leaf_grad.iter().enumerate() {
            let orig = work[li].data()[ci];
            let (up, down) = (orig + h, orig - h);
            work[li].data_mut()[ci] = up;
            let (tp, _, lp) = evaluate(&build, &work, false)?;
            let fp = tp.value(lp).item()?;
            work[li].data_mut()[ci] = down;
            let (tm, _, lm) = evaluate(&build, &work, false)?;
            let fm = tm.value(lm).item()?;
            work[li].data_mut()[ci] = orig;
            // divide by the step actually taken after rounding of orig ± h
            let numeric = (fp - fm) / (up - down);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err.is_nan() {
                return Err(TensorError::invalid("gradcheck produced a NaN"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
