use crate::error::Result;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{half_sq_dist_unchecked, CenterBank, EmbeddingBatch, LossResult, Reduction};

/// Center loss `½ Σ ‖f_i − c_{y_i}‖²` with the averaged center update
/// `Δc_j = Σ_{y_i = j} (f_i − c_j) / (1 + n_j)`.
pub fn center_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
    reduction: Reduction,
) -> Result<LossResult<T>> {
    batch.check_against(centers)?;
    let scale = reduction.scale::<T>(batch.len());
    let (k, d) = centers.centers().shape();

    let mut loss = T::zero();
    let mut grad = Matrix::zeros(batch.len(), d);
    let mut pull = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];

    for (i, (f, &y)) in batch.features().row_iter().zip(batch.labels()).enumerate() {
        let c = centers.center(y);
        loss += half_sq_dist_unchecked(f, c);
        counts[y] += 1;
        for (((g, p), &fi), &ci) in grad.row_mut(i).iter_mut().zip(pull.row_mut(y).iter_mut()).zip(f).zip(c) {
            *g = (fi - ci) * scale;
            *p += fi - ci;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        let inv = T::one() / T::of(1.0 + n as f64);
        pull.row_mut(j).iter_mut().for_each(|v| *v *= inv);
    }

    let loss = loss * scale;
    Ok(LossResult {
        loss,
        grad_features: Some(grad),
        grad_logits: None,
        center_update: Some(pull),
        softmax_component: None,
        metric_component: Some(loss),
    })
}
