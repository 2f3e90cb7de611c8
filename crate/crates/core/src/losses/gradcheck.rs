use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;

/// Compares an analytic gradient with central differences of `loss_fn`.
///
/// Returns `max_k |analytic_k − numeric_k| / max(1, |numeric_k|)`. The caller
/// keeps `point` away from kinks of the loss (at least `10·h`).
pub fn finite_diff_check<T, F>(mut loss_fn: F, analytic: &[T], point: &[T], h: T) -> Result<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> Result<T>,
{
    if h.is_nan() || h <= T::zero() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    ensure_dim("finite_diff_check gradient", point.len(), analytic.len())?;

    let mut x = point.to_vec();
    let two_h = h + h;
    let mut worst = T::zero();
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + h;
        let plus = loss_fn(&x)?;
        x[k] = orig - h;
        let minus = loss_fn(&x)?;
        x[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluation at coordinate {k}")));
        }
        let numeric = (plus - minus) / two_h;
        let err = (analytic[k] - numeric).abs() / numeric.abs().max(T::one());
        if err.is_nan() {
            return Err(Error::NonFinite(format!("analytic gradient at coordinate {k}")));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratic() {
        let x = [0.3, -1.7, 2.5, 10.0];
        let err = finite_diff_check(|p| Ok(0.5 * p.iter().map(|v| v * v).sum::<f64>()), &x, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = [1.0, 2.0];
        let err = finite_diff_check(|p| Ok(p[0] * p[1]), &[1.0, 2.0], &x, 1e-5).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let r = finite_diff_check(|p: &[f64]| Ok(p[0].ln()), &[1.0], &[0.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
