//! Triplet-center loss.
//!
//! Each sample forms one triple with its own class center and its nearest
//! negative center, so a batch of `M` samples costs `M·K` distance
//! evaluations instead of the cubic triple enumeration of the triplet loss.

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{half_sq_dist_unchecked, CenterBank, DistanceCounter, EmbeddingBatch, Reduction};

#[derive(Debug, Clone, PartialEq)]
pub struct TclForwardResult<T> {
    pub loss: T,
    /// Hinge value of every sample.
    pub per_sample_loss: Vec<T>,
    /// Index of the nearest center of another class (ties to the lowest index).
    pub nearest_negative: Vec<usize>,
    /// `per_sample_loss[i] > 0`.
    pub active: Vec<bool>,
    pub positive_dist: Vec<T>,
    pub negative_dist: Vec<T>,
    /// Gap between the runner-up and the nearest negative distance
    /// (infinite when only one negative center exists).
    pub argmin_gap: Vec<T>,
    pub reduction: Reduction,
}

impl<T: Scalar> TclForwardResult<T> {
    /// Smallest distance of any sample to a non-differentiable point: the
    /// hinge boundary or an argmin tie.
    pub fn min_kink_distance(&self, margin: T) -> T {
        self.positive_dist
            .iter()
            .zip(&self.negative_dist)
            .zip(&self.argmin_gap)
            .map(|((&p, &n), &g)| (p + margin - n).abs().min(g))
            .fold(T::infinity(), T::min)
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

pub fn tcl_forward<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
    margin: T,
    reduction: Reduction,
) -> Result<TclForwardResult<T>> {
    tcl_forward_counted(batch, centers, margin, reduction, &mut DistanceCounter::default())
}

/// [`tcl_forward`] that also records every distance evaluation in `counter`.
pub fn tcl_forward_counted<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
    margin: T,
    reduction: Reduction,
    counter: &mut DistanceCounter,
) -> Result<TclForwardResult<T>> {
    let k = centers.num_classes();
    if k < 2 {
        return Err(Error::NoNegativeCenter(k));
    }
    if margin < T::zero() || !margin.is_finite() {
        return Err(Error::InvalidArgument("margin must be finite and non-negative".into()));
    }
    batch.check_against(centers)?;

    let m = batch.len();
    let mut out = TclForwardResult {
        loss: T::zero(),
        per_sample_loss: Vec::with_capacity(m),
        nearest_negative: Vec::with_capacity(m),
        active: Vec::with_capacity(m),
        positive_dist: Vec::with_capacity(m),
        negative_dist: Vec::with_capacity(m),
        argmin_gap: Vec::with_capacity(m),
        reduction,
    };

    for (f, &y) in batch.features().row_iter().zip(batch.labels()) {
        let pos = half_sq_dist_unchecked(f, centers.center(y));
        counter.positive += 1;

        let mut best = (usize::MAX, T::infinity());
        let mut runner_up = T::infinity();
        for j in (0..k).filter(|&j| j != y) {
            let d = half_sq_dist_unchecked(f, centers.center(j));
            counter.negative += 1;
            // strict comparison keeps the lowest index on ties
            if d < best.1 {
                runner_up = best.1;
                best = (j, d);
            } else if d < runner_up {
                runner_up = d;
            }
        }

        let hinge = (pos + margin - best.1).max(T::zero());
        out.per_sample_loss.push(hinge);
        out.nearest_negative.push(best.0);
        out.active.push(hinge > T::zero());
        out.positive_dist.push(pos);
        out.negative_dist.push(best.1);
        out.argmin_gap.push(runner_up - best.1);
    }

    let total: T = out.per_sample_loss.iter().copied().sum();
    out.loss = total * reduction.scale::<T>(m);
    Ok(out)
}

fn check_result<T: Scalar>(
    result: &TclForwardResult<T>,
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
) -> Result<()> {
    ensure_dim("tcl result length", batch.len(), result.active.len())?;
    batch.check_against(centers)
}

/// Gradient of the batch loss w.r.t. every embedding: `c_q − c_y` for
/// active samples, zero otherwise.
pub fn tcl_backward<T: Scalar>(
    result: &TclForwardResult<T>,
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
) -> Result<Matrix<T>> {
    check_result(result, batch, centers)?;
    let scale = result.reduction.scale::<T>(batch.len());
    let mut grad = Matrix::zeros(batch.len(), batch.dim());
    for (i, &y) in batch.labels().iter().enumerate() {
        if !result.active[i] {
            continue;
        }
        let neg = centers.center(result.nearest_negative[i]);
        let own = centers.center(y);
        for ((g, &cn), &cy) in grad.row_mut(i).iter_mut().zip(neg).zip(own) {
            *g = (cn - cy) * scale;
        }
    }
    Ok(grad)
}

/// Averaged center update direction.
///
/// Each center moves toward its own active members and away from the
/// active samples that picked it as nearest negative; both sums are damped
/// by `1 + count`. The result is added to the centers.
pub fn tcl_center_update<T: Scalar>(
    result: &TclForwardResult<T>,
    batch: &EmbeddingBatch<T>,
    centers: &CenterBank<T>,
) -> Result<Matrix<T>> {
    check_result(result, batch, centers)?;
    let (k, d) = centers.centers().shape();
    let mut pull = Matrix::<T>::zeros(k, d);
    let mut push = Matrix::<T>::zeros(k, d);
    let mut pull_count = vec![0usize; k];
    let mut push_count = vec![0usize; k];

    for (i, (f, &y)) in batch.features().row_iter().zip(batch.labels()).enumerate() {
        if !result.active[i] {
            continue;
        }
        let q = result.nearest_negative[i];
        pull_count[y] += 1;
        push_count[q] += 1;
        for ((p, &fi), &c) in pull.row_mut(y).iter_mut().zip(f).zip(centers.center(y)) {
            *p += fi - c;
        }
        for ((p, &fi), &c) in push.row_mut(q).iter_mut().zip(f).zip(centers.center(q)) {
            *p += fi - c;
        }
    }

    let mut delta = Matrix::zeros(k, d);
    for j in 0..k {
        let a = T::one() / T::of(1.0 + pull_count[j] as f64);
        let b = T::one() / T::of(1.0 + push_count[j] as f64);
        let (pj, qj) = (pull.row(j), push.row(j));
        for ((o, &p), &q) in delta.row_mut(j).iter_mut().zip(pj).zip(qj) {
            *o = p * a - q * b;
        }
    }
    Ok(delta)
}
