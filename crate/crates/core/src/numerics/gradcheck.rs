use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Smallest denominator of the relative error. Central differences of a
/// loss near 1 carry roundoff of about `1e-16 / step`.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Largest coordinate-wise relative error between an analytic gradient and
/// a central difference.
///
/// `f` returns the scalar value and its analytic gradient at a point; the
/// analytic gradient is taken once at `theta`. The error for coordinate `i`
/// is `|a - n| / max(|a| + |n|, DENOMINATOR_FLOOR)`, so coordinates whose
/// gradient is below the floor are compared in absolute terms.
pub fn finite_difference_check<F>(mut f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!(
            "step must be positive, got {step}"
        )));
    }
    let (_, analytic) = f(theta)?;
    if analytic.shape() != theta.shape() {
        return Err(Error::dim(
            "finite_difference_check",
            analytic.shape(),
            theta.shape(),
        ));
    }
    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let original = theta.data()[i];
        probe.data_mut()[i] = original + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = original - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric {
                op: "finite_difference_check",
            });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(DENOMINATOR_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}
