use super::Tensor;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central finite differences.
///
/// `f` returns the scalar value at its argument together with the analytic
/// gradient there; only the gradient at `x` itself is used. The result is
/// `max_i |analytic_i − numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> (f64, Tensor),
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let (value, analytic) = f(x);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {value}")));
    }
    x.ensure_same_shape(&analytic, "grad_check")?;

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (plus, _) = f(&probe);
        probe.data_mut()[i] = orig - h;
        let (minus, _) = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("f(x ± h) at element {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
