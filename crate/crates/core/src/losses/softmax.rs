use crate::error::{ensure_dim, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{check_labels, LossResult};

/// Mean softmax cross-entropy with log-sum-exp stabilisation.
pub fn softmax_ce<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> Result<LossResult<T>> {
    let (m, k) = logits.shape();
    ensure_dim("softmax labels", m, labels.len())?;
    if m == 0 || k == 0 {
        return Err(Error::InvalidArgument("softmax needs a non-empty logit matrix".into()));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    check_labels(labels, k)?;

    let inv_m = T::one() / T::of(m as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(m, k);
    for (i, (row, &y)) in logits.row_iter().zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, (g, &z)) in grad.row_mut(i).iter_mut().zip(row).enumerate() {
            let p = (z - log_z).exp();
            let target = if j == y { T::one() } else { T::zero() };
            *g = (p - target) * inv_m;
        }
    }
    let loss = loss * inv_m;
    Ok(LossResult {
        loss,
        grad_features: None,
        grad_logits: Some(grad),
        center_update: None,
        softmax_component: Some(loss),
        metric_component: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits() {
        let logits = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let r = softmax_ce(&logits, &[0]).unwrap();
        assert_abs_diff_eq!(r.loss, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(r.grad_logits.unwrap().as_slice(), &[-0.5, 0.5]);

        let logits = Matrix::from_vec(2, 2, vec![0.0; 4]).unwrap();
        let r = softmax_ce(&logits, &[0, 0]).unwrap();
        assert_eq!(r.grad_logits.unwrap().row(0), &[-0.25, 0.25]);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let logits = Matrix::<f64>::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let r = softmax_ce(&logits, &[0]).unwrap();
        assert!(r.loss.is_finite());
        assert!(r.loss.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_label() {
        let logits = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(softmax_ce(&logits, &[2]).is_err());
    }
}
