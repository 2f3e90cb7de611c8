//! Mini-batch training loop.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{batches, MultiViewObject};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{combined_loss, CenterBank, EmbeddingBatch, LossConfig, LossResult};
use crate::model::{backward_batch, forward_object, ForwardTrace, NetworkParams};
use crate::optim::{apply_center_update, sgd_step, CenterUpdateConfig, OptimizerState, SgdConfig};
use crate::scalar::Scalar;

/// Network weights together with the class centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model<T> {
    pub params: NetworkParams<T>,
    pub centers: CenterBank<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Averages over the batches of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the evaluation pass before any update.
    pub epoch: usize,
    pub total: f64,
    pub softmax: Option<f64>,
    pub metric: Option<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunStats {
    pub initial: EpochStats,
    pub epochs: Vec<EpochStats>,
    /// Batches skipped because they held no valid triple.
    pub skipped_batches: usize,
    pub wall_time: Duration,
}

impl TrainRunStats {
    /// Initial pass followed by every epoch.
    pub fn curve(&self) -> impl Iterator<Item = &EpochStats> {
        std::iter::once(&self.initial).chain(&self.epochs)
    }

    /// `epoch,total,softmax,metric_component,accuracy`; absent components are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,total,softmax,metric_component,accuracy\n");
        for e in self.curve() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.total,
                opt(e.softmax),
                opt(e.metric),
                e.accuracy
            ));
        }
        out
    }
}

#[derive(Default)]
struct EpochAccumulator {
    batches: usize,
    total: f64,
    softmax: Option<f64>,
    metric: Option<f64>,
    correct: usize,
    seen: usize,
}

impl EpochAccumulator {
    fn add<T: Scalar>(&mut self, r: &LossResult<T>, logits: &Matrix<T>, labels: &[usize]) {
        self.batches += 1;
        self.total += r.loss.to_f64_lossy();
        if let Some(s) = r.softmax_component {
            *self.softmax.get_or_insert(0.0) += s.to_f64_lossy();
        }
        if let Some(m) = r.metric_component {
            *self.metric.get_or_insert(0.0) += m.to_f64_lossy();
        }
        for (row, &y) in logits.row_iter().zip(labels) {
            self.seen += 1;
            if argmax(row) == y {
                self.correct += 1;
            }
        }
    }

    fn finish(self, epoch: usize) -> EpochStats {
        let n = self.batches.max(1) as f64;
        EpochStats {
            epoch,
            total: self.total / n,
            softmax: self.softmax.map(|v| v / n),
            metric: self.metric.map(|v| v / n),
            accuracy: if self.seen == 0 {
                0.0
            } else {
                self.correct as f64 / self.seen as f64
            },
        }
    }
}

/// Index of the largest entry, ties to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

struct PreparedObject<T> {
    views: Matrix<T>,
    class: usize,
    domain: usize,
    id: String,
}

fn prepare<T: Scalar>(objects: &[MultiViewObject]) -> Vec<PreparedObject<T>> {
    objects
        .iter()
        .map(|o| PreparedObject {
            views: o.views.cast(),
            class: o.class,
            domain: o.domain,
            id: o.id.clone(),
        })
        .collect()
}

struct BatchForward<T> {
    traces: Vec<ForwardTrace<T>>,
    batch: EmbeddingBatch<T>,
    logits: Matrix<T>,
}

fn forward_batch<T: Scalar>(
    params: &NetworkParams<T>,
    objs: &[PreparedObject<T>],
    idx: &[usize],
) -> Result<BatchForward<T>> {
    let traces = idx
        .iter()
        .map(|&i| forward_object(&objs[i].views, objs[i].domain, params))
        .collect::<Result<Vec<_>>>()?;
    let d = params.embedding_dim();
    let k = params.num_classes();
    let mut emb = Matrix::zeros(idx.len(), d);
    let mut logits = Matrix::zeros(idx.len(), k);
    for (r, t) in traces.iter().enumerate() {
        emb.row_mut(r).copy_from_slice(&t.embedding);
        logits.row_mut(r).copy_from_slice(&t.logits);
    }
    if !emb.is_finite() || !logits.is_finite() {
        return Err(Error::NonFinite("network output during training".into()));
    }
    let labels = idx.iter().map(|&i| objs[i].class).collect();
    let ids = idx.iter().map(|&i| objs[i].id.clone()).collect();
    Ok(BatchForward {
        traces,
        batch: EmbeddingBatch::new(emb, labels, ids)?,
        logits,
    })
}

/// Trains `model` on `objects`.
///
/// Each epoch shuffles with a stream keyed by `(seed, epoch)`; for every
/// batch it runs forward, the configured loss, backward, an SGD step and
/// (for center-based losses) the center update. The run is a pure function
/// of its inputs. Batches without a valid triple are skipped and counted.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    objects: &[MultiViewObject],
    loss_cfg: &LossConfig,
    sgd_cfg: &SgdConfig,
    center_cfg: &CenterUpdateConfig,
    opts: &TrainOptions,
) -> Result<(Model<T>, TrainRunStats)> {
    let start = Instant::now();
    if objects.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if opts.batch_size == 0 || (loss_cfg.kind.needs_pairs() && opts.batch_size < 2) {
        return Err(Error::InvalidArgument(format!(
            "batch_size {} too small for {}",
            opts.batch_size, loss_cfg.kind
        )));
    }
    loss_cfg.validate()?;
    sgd_cfg.validate()?;
    center_cfg.validate()?;
    if model.centers.num_classes() != model.params.num_classes() || model.centers.dim() != model.params.embedding_dim()
    {
        return Err(Error::InvalidArgument("center bank does not match the network".into()));
    }

    let objs = prepare::<T>(objects);
    let mut skipped = 0usize;

    // evaluation pass with the epoch-0 ordering, no updates
    let mut acc = EpochAccumulator::default();
    for idx in batches(objs.len(), opts.batch_size, opts.seed, 0)? {
        let fwd = forward_batch(&model.params, &objs, &idx)?;
        match combined_loss(&fwd.batch, Some(&fwd.logits), Some(&model.centers), loss_cfg) {
            Ok(r) => acc.add(&r, &fwd.logits, fwd.batch.labels()),
            Err(Error::DegenerateBatch(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let initial = acc.finish(0);

    let mut state = OptimizerState::new(&model.params);
    let mut epochs = Vec::with_capacity(opts.epochs);
    for epoch in 1..=opts.epochs {
        let mut acc = EpochAccumulator::default();
        for idx in batches(objs.len(), opts.batch_size, opts.seed, epoch as u64)? {
            let fwd = forward_batch(&model.params, &objs, &idx)?;
            let result = match combined_loss(&fwd.batch, Some(&fwd.logits), Some(&model.centers), loss_cfg) {
                Ok(r) => r,
                Err(Error::DegenerateBatch(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !result.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}")));
            }
            let grads = backward_batch(
                &fwd.traces,
                result.grad_features.as_ref(),
                result.grad_logits.as_ref(),
                &model.params,
            )?;
            sgd_step(&mut model.params, &grads.params, &mut state, sgd_cfg)?;
            if loss_cfg.kind.owns_centers() {
                if let Some(delta) = &result.center_update {
                    apply_center_update(&mut model.centers, delta, center_cfg)?;
                }
            }
            if !model.params.is_finite() || !model.centers.centers().is_finite() {
                return Err(Error::NonFinite(format!("parameters after a step in epoch {epoch}")));
            }
            acc.add(&result, &fwd.logits, fwd.batch.labels());
        }
        epochs.push(acc.finish(epoch));
    }

    Ok((
        model,
        TrainRunStats {
            initial,
            epochs,
            skipped_batches: skipped,
            wall_time: start.elapsed(),
        },
    ))
}

/// Embeddings of `objects` in order, one row per object.
pub fn embed_objects<T: Scalar>(params: &NetworkParams<T>, objects: &[MultiViewObject]) -> Result<Matrix<T>> {
    let rows = objects
        .par_iter()
        .map(|o| forward_object(&o.views.cast::<T>(), o.domain, params).map(|t| t.embedding))
        .collect::<Result<Vec<_>>>()?;
    let out = Matrix::from_rows(&rows)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("embeddings".into()));
    }
    Ok(out)
}

/// Fraction of objects whose arg-max logit equals their class.
pub fn accuracy<T: Scalar>(params: &NetworkParams<T>, objects: &[MultiViewObject]) -> Result<f64> {
    let hits = objects
        .par_iter()
        .map(|o| {
            forward_object(&o.views.cast::<T>(), o.domain, params).map(|t| usize::from(argmax(&t.logits) == o.class))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / objects.len().max(1) as f64)
}
