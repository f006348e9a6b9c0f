use crate::error::{Error, Result};

use super::tensor::Tensor2;

pub const FD_STEP: f64 = 1e-4;

/// Largest relative disagreement between an analytic gradient and a central
/// difference, over every coordinate of `x`.
///
/// `f` returns the scalar value and its analytic gradient at the given point.
/// The per-coordinate error is `|a - fd| / (|a| + |fd| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor2) -> Result<f64>
where
    F: Fn(&Tensor2) -> Result<(f64, Tensor2)>,
{
    let (v0, analytic) = f(x)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("grad_check base value".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!("gradient {:?} for input {:?}", analytic.shape(), x.shape())));
    }
    analytic.ensure_finite("analytic gradient")?;
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let plus = f(&probe)?.0;
        probe.data_mut()[i] = orig - FD_STEP;
        let minus = f(&probe)?.0;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("grad_check coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / (a.abs() + fd.abs() + 1e-8));
    }
    Ok(worst)
}
