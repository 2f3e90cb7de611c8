//! Supervision losses with analytic gradients.
//!
//! Every loss here is a pure function of its inputs. Distances are half
//! squared Euclidean throughout, see [`half_sq_dist`].

mod center;
mod gradcheck;
mod softmax;
mod tcl;
mod triplet;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::linalg::{sq_norm_diff, Matrix};
use crate::scalar::Scalar;

pub use center::center_loss;
pub use gradcheck::finite_diff_check;
pub use softmax::softmax_ce;
pub use tcl::{tcl_backward, tcl_center_update, tcl_forward, tcl_forward_counted, TclForwardResult};
pub use triplet::{triplet_hinge, triplet_loss, triplet_loss_counted};

/// `½‖a − b‖²`.
pub fn half_sq_dist<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    ensure_dim("half_sq_dist", a.len(), b.len())?;
    Ok(T::half() * sq_norm_diff(a, b))
}

#[inline]
pub(crate) fn half_sq_dist_unchecked<T: Scalar>(a: &[T], b: &[T]) -> T {
    T::half() * sq_norm_diff(a, b)
}

/// Embeddings of one mini-batch together with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    sample_ids: Vec<String>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, sample_ids: Vec<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument(
                "embedding batch must hold at least one sample".into(),
            ));
        }
        ensure_dim("batch labels", features.rows(), labels.len())?;
        ensure_dim("batch sample ids", features.rows(), sample_ids.len())?;
        if !features.is_finite() {
            return Err(Error::NonFinite("embedding batch features".into()));
        }
        Ok(Self {
            features,
            labels,
            sample_ids,
        })
    }

    /// Batch with ids `"0"`, `"1"`, ...
    pub fn with_labels(features: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len()).map(|i| i.to_string()).collect();
        Self::new(features, labels, ids)
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Replaces the features, keeping labels and ids.
    pub fn with_features(&self, features: Matrix<T>) -> Result<Self> {
        Self::new(features, self.labels.clone(), self.sample_ids.clone())
    }

    pub(crate) fn check_against(&self, centers: &CenterBank<T>) -> Result<()> {
        ensure_dim("embedding dim vs center dim", centers.dim(), self.dim())?;
        check_labels(&self.labels, centers.num_classes())
    }
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Learnable class centers, one `d`-vector per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBank<T> {
    centers: Matrix<T>,
}

impl<T: Scalar> CenterBank<T> {
    pub fn new(centers: Matrix<T>) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::InvalidArgument(
                "center bank needs at least one class and one dimension".into(),
            ));
        }
        if !centers.is_finite() {
            return Err(Error::NonFinite("center bank".into()));
        }
        Ok(Self { centers })
    }

    /// Centers drawn i.i.d. from `N(0, std²)`.
    pub fn gaussian<R: Rng + ?Sized>(num_classes: usize, dim: usize, std: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..num_classes * dim).map(|_| T::of(normal.sample(rng))).collect();
        Self::new(Matrix::from_vec(num_classes, dim, data)?)
    }

    pub fn num_classes(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn center(&self, class: usize) -> &[T] {
        self.centers.row(class)
    }

    pub fn centers(&self) -> &Matrix<T> {
        &self.centers
    }

    pub fn centers_mut(&mut self) -> &mut Matrix<T> {
        &mut self.centers
    }

    pub fn cast<U: Scalar>(&self) -> CenterBank<U> {
        CenterBank {
            centers: self.centers.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub(crate) fn scale<T: Scalar>(self, m: usize) -> T {
        match self {
            Reduction::Sum => T::one(),
            Reduction::Mean => T::one() / T::of(m as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletStrategy {
    #[default]
    BatchAll,
    BatchHard,
}

/// Which supervision signal(s) drive training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "softmax")]
    Softmax,
    #[serde(rename = "triplet")]
    Triplet,
    #[serde(rename = "center")]
    Center,
    #[serde(rename = "tcl")]
    Tcl,
    #[serde(rename = "tcl+softmax")]
    TclSoftmax,
    #[serde(rename = "center+softmax")]
    CenterSoftmax,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::Softmax,
        LossKind::Triplet,
        LossKind::Center,
        LossKind::Tcl,
        LossKind::TclSoftmax,
        LossKind::CenterSoftmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Triplet => "triplet",
            LossKind::Center => "center",
            LossKind::Tcl => "tcl",
            LossKind::TclSoftmax => "tcl+softmax",
            LossKind::CenterSoftmax => "center+softmax",
        }
    }

    pub fn uses_softmax(self) -> bool {
        matches!(self, LossKind::Softmax | LossKind::TclSoftmax | LossKind::CenterSoftmax)
    }

    /// Kinds with a learnable center bank updated outside the main optimizer.
    pub fn owns_centers(self) -> bool {
        matches!(
            self,
            LossKind::Center | LossKind::Tcl | LossKind::TclSoftmax | LossKind::CenterSoftmax
        )
    }

    /// Kinds whose metric term compares samples within the batch.
    pub fn needs_pairs(self) -> bool {
        matches!(self, LossKind::Triplet)
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

/// Loss selection and hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub lambda: f64,
    pub reduction: Reduction,
    pub triplet_strategy: TripletStrategy,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::TclSoftmax,
            margin: 5.0,
            lambda: 0.01,
            reduction: Reduction::Sum,
            triplet_strategy: TripletStrategy::BatchAll,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Scalar loss plus whichever gradients the loss kind produces.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult<T> {
    pub loss: T,
    pub grad_features: Option<Matrix<T>>,
    pub grad_logits: Option<Matrix<T>>,
    /// Additive update direction for the center bank (unweighted).
    pub center_update: Option<Matrix<T>>,
    pub softmax_component: Option<T>,
    /// Unweighted value of the metric-learning term.
    pub metric_component: Option<T>,
}

impl<T: Scalar> LossResult<T> {
    pub(crate) fn scalar(loss: T) -> Self {
        Self {
            loss,
            grad_features: None,
            grad_logits: None,
            center_update: None,
            softmax_component: None,
            metric_component: None,
        }
    }
}

/// Counts distance evaluations and enumerated triples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DistanceCounter {
    /// Sample-to-own-center distances.
    pub positive: usize,
    /// Sample-to-other-center distances.
    pub negative: usize,
    /// Sample-to-sample distances.
    pub pairwise: usize,
    /// (anchor, positive, negative) triples visited.
    pub triples: usize,
}

impl DistanceCounter {
    pub fn distance_evals(&self) -> usize {
        self.positive + self.negative + self.pairwise
    }
}

/// Joint objective: `λ·L_metric + L_softmax` for the combined kinds, the
/// plain loss otherwise.
///
/// The center update is passed through unweighted; centers carry their own
/// learning rate.
pub fn combined_loss<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    logits: Option<&Matrix<T>>,
    centers: Option<&CenterBank<T>>,
    cfg: &LossConfig,
) -> Result<LossResult<T>> {
    let margin = T::of(cfg.margin);
    let lambda = T::of(cfg.lambda);

    let softmax = if cfg.kind.uses_softmax() {
        let logits = logits.ok_or_else(|| Error::InvalidArgument(format!("{} requires logits", cfg.kind)))?;
        Some(softmax_ce(logits, batch.labels())?)
    } else {
        None
    };

    let need_centers = || centers.ok_or_else(|| Error::InvalidArgument(format!("{} requires a center bank", cfg.kind)));

    let metric: Option<LossResult<T>> = match cfg.kind {
        LossKind::Softmax => None,
        LossKind::Triplet => Some(triplet_loss(batch, margin, cfg.triplet_strategy)?),
        LossKind::Center | LossKind::CenterSoftmax => Some(center_loss(batch, need_centers()?, cfg.reduction)?),
        LossKind::Tcl | LossKind::TclSoftmax => {
            let centers = need_centers()?;
            let fwd = tcl_forward(batch, centers, margin, cfg.reduction)?;
            Some(LossResult {
                loss: fwd.loss,
                grad_features: Some(tcl_backward(&fwd, batch, centers)?),
                grad_logits: None,
                center_update: Some(tcl_center_update(&fwd, batch, centers)?),
                softmax_component: None,
                metric_component: Some(fwd.loss),
            })
        }
    };

    let weight = if cfg.kind.uses_softmax() { lambda } else { T::one() };

    let mut out = LossResult::scalar(T::zero());
    if let Some(sm) = softmax {
        out.loss = sm.loss;
        out.softmax_component = Some(sm.loss);
        out.grad_logits = sm.grad_logits;
    }
    if let Some(metric) = metric {
        out.loss += weight * metric.loss;
        out.metric_component = Some(metric.loss);
        out.center_update = metric.center_update;
        // a zero weight leaves the feature gradient absent so that the
        // softmax-only path is reproduced exactly
        if weight != T::zero() {
            out.grad_features = metric.grad_features.map(|mut g| {
                if weight != T::one() {
                    g.scale(weight);
                }
                g
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn half_sq_dist_hand_values() {
        assert_eq!(half_sq_dist(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(half_sq_dist(&[0.0], &[2.0]).unwrap(), 2.0);
        assert_eq!(half_sq_dist(&[1.0, 1.0], &[4.0, 5.0]).unwrap(), 12.5);
    }

    #[test]
    fn half_sq_dist_dimension_mismatch() {
        let err = half_sq_dist(&[1.0, 2.0], &[1.0]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn loss_kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("contrastive".parse::<LossKind>().is_err());
    }

    fn one_sample() -> (EmbeddingBatch<f64>, Matrix<f64>, CenterBank<f64>) {
        let batch = EmbeddingBatch::with_labels(Matrix::from_vec(1, 1, vec![0.5]).unwrap(), vec![0]).unwrap();
        let logits = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let centers = CenterBank::new(Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap()).unwrap();
        (batch, logits, centers)
    }

    #[test]
    fn lambda_zero_is_plain_softmax() {
        let (batch, logits, centers) = one_sample();
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let joint = combined_loss(&batch, Some(&logits), Some(&centers), &cfg).unwrap();
        let plain = softmax_ce(&logits, batch.labels()).unwrap();
        assert_eq!(joint.loss, plain.loss);
        assert_eq!(joint.grad_logits, plain.grad_logits);
        assert!(joint.grad_features.is_none());
    }

    #[test]
    fn weighted_sum_matches_hand_value() {
        let (batch, logits, centers) = one_sample();
        let joint = combined_loss(&batch, Some(&logits), Some(&centers), &LossConfig::default()).unwrap();
        // 0.01 * 4.0 + ln 2
        assert_abs_diff_eq!(joint.loss, 0.04 + std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(joint.loss, 0.7331, epsilon = 1e-4);
        assert_eq!(joint.metric_component, Some(4.0));
    }

    #[test]
    fn feature_gradient_is_weighted_tcl_term() {
        let (batch, logits, centers) = one_sample();
        let cfg = LossConfig::default();
        let joint = combined_loss(&batch, Some(&logits), Some(&centers), &cfg).unwrap();
        let fwd = tcl_forward(&batch, &centers, 5.0, Reduction::Sum).unwrap();
        let g = tcl_backward(&fwd, &batch, &centers).unwrap();
        assert_eq!(joint.grad_features.unwrap().as_slice(), &[0.01 * g.as_slice()[0]]);
        // center update is not weighted
        assert_eq!(
            joint.center_update.unwrap(),
            tcl_center_update(&fwd, &batch, &centers).unwrap()
        );
    }

    #[test]
    fn tcl_kind_needs_two_classes() {
        let batch = EmbeddingBatch::with_labels(Matrix::from_vec(1, 1, vec![0.5]).unwrap(), vec![0]).unwrap();
        let centers = CenterBank::new(Matrix::from_vec(1, 1, vec![0.0]).unwrap()).unwrap();
        let logits = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let err = combined_loss(&batch, Some(&logits), Some(&centers), &LossConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoNegativeCenter(1)));
    }

    #[test]
    fn defaults_match_published_settings() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.margin, cfg.lambda), (5.0, 0.01));
        assert_eq!(cfg.reduction, Reduction::Sum);
    }

    #[test]
    fn batch_rejects_non_finite_and_empty() {
        assert!(EmbeddingBatch::with_labels(Matrix::from_vec(1, 1, vec![f64::NAN]).unwrap(), vec![0]).is_err());
        assert!(EmbeddingBatch::<f64>::with_labels(Matrix::zeros(0, 3), vec![]).is_err());
    }
}
