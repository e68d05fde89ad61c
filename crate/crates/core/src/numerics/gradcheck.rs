use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `|a − b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares an analytic gradient against central differences.
///
/// `f` maps a parameter vector (same shape as `theta`) to the objective and
/// its analytic gradient. The analytic gradient is taken at `theta`; every
/// coordinate is then perturbed by `±eps`. Returns the largest
/// [`relative_error`] over all coordinates.
pub fn finite_diff_check<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite difference step {eps} outside [1e-7, 1e-3]")));
    }
    let (f0, analytic) = f(theta)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    if analytic.len() != theta.numel() {
        return Err(Error::shape(
            "finite_diff_check",
            format!("gradient of {} values for {} parameters", analytic.len(), theta.numel()),
        ));
    }
    let mut probe = theta.clone();
    let mut worst = 0.0_f64;
    for i in 0..theta.numel() {
        let x = theta.data()[i];
        probe.data_mut()[i] = x + eps;
        let (up, _) = f(&probe)?;
        probe.data_mut()[i] = x - eps;
        let (down, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !(up.is_finite() && down.is_finite()) {
            return Err(Error::NonFinite(format!("finite_diff_check objective at coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
