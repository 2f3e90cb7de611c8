use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

use super::{half_sq_dist_unchecked, DistanceCounter, EmbeddingBatch, LossResult, TripletStrategy};

/// Hinge of a single `(anchor, positive, negative)` triple.
pub fn triplet_hinge<T: Scalar>(anchor: &[T], positive: &[T], negative: &[T], margin: T) -> T {
    (margin + half_sq_dist_unchecked(anchor, positive) - half_sq_dist_unchecked(anchor, negative)).max(T::zero())
}

/// Within-batch triplet loss, averaged over the selected triples.
///
/// Batch-all visits every `(a, p, n)` with `y_a = y_p`, `a ≠ p`, `y_a ≠ y_n`.
/// Batch-hard keeps one triple per anchor: farthest positive and nearest
/// negative, ties to the lowest index.
pub fn triplet_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    margin: T,
    strategy: TripletStrategy,
) -> Result<LossResult<T>> {
    triplet_loss_counted(batch, margin, strategy, &mut DistanceCounter::default())
}

pub fn triplet_loss_counted<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    margin: T,
    strategy: TripletStrategy,
    counter: &mut DistanceCounter,
) -> Result<LossResult<T>> {
    let m = batch.len();
    let feats = batch.features();
    let labels = batch.labels();

    let mut dist = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            let d = half_sq_dist_unchecked(feats.row(i), feats.row(j));
            counter.pairwise += 1;
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }

    let mut triples: Vec<(usize, usize, usize)> = Vec::new();
    match strategy {
        TripletStrategy::BatchAll => {
            for a in 0..m {
                for p in (0..m).filter(|&p| p != a && labels[p] == labels[a]) {
                    for n in (0..m).filter(|&n| labels[n] != labels[a]) {
                        counter.triples += 1;
                        triples.push((a, p, n));
                    }
                }
            }
        }
        TripletStrategy::BatchHard => {
            for a in 0..m {
                let mut hardest_pos: Option<usize> = None;
                let mut hardest_neg: Option<usize> = None;
                for j in (0..m).filter(|&j| j != a) {
                    if labels[j] == labels[a] {
                        if hardest_pos.is_none_or(|p| dist[(a, j)] > dist[(a, p)]) {
                            hardest_pos = Some(j);
                        }
                    } else if hardest_neg.is_none_or(|n| dist[(a, j)] < dist[(a, n)]) {
                        hardest_neg = Some(j);
                    }
                }
                if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
                    counter.triples += 1;
                    triples.push((a, p, n));
                }
            }
        }
    }

    if triples.is_empty() {
        return Err(Error::DegenerateBatch(
            "no (anchor, positive, negative) triple in batch".into(),
        ));
    }

    let inv = T::one() / T::of(triples.len() as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(m, batch.dim());
    for &(a, p, n) in &triples {
        let hinge = margin + dist[(a, p)] - dist[(a, n)];
        if hinge <= T::zero() {
            continue;
        }
        loss += hinge;
        for k in 0..batch.dim() {
            let (fa, fp, fn_) = (feats[(a, k)], feats[(p, k)], feats[(n, k)]);
            grad[(a, k)] += (fn_ - fp) * inv;
            grad[(p, k)] += (fp - fa) * inv;
            grad[(n, k)] += (fa - fn_) * inv;
        }
    }
    let loss = loss * inv;
    Ok(LossResult {
        loss,
        grad_features: Some(grad),
        grad_logits: None,
        center_update: None,
        softmax_component: None,
        metric_component: Some(loss),
    })
}
