//! Finite-difference verification of every analytic gradient, on random
//! configurations kept away from non-differentiable points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::MultiViewObject;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{
    center_loss, combined_loss, finite_diff_check, half_sq_dist_unchecked, softmax_ce, tcl_backward, tcl_forward,
    triplet_loss, CenterBank, EmbeddingBatch, LossConfig, LossKind, Reduction, TripletStrategy,
};
use crate::model::{backward_batch, forward_object, init_params, ForwardTrace, NetworkDims, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Accepted random configurations per loss.
    pub configs: usize,
    /// Random networks per network check.
    pub networks: usize,
    pub h: f64,
    /// Minimum distance of an accepted point to any kink or argmin tie.
    pub kink: f64,
    pub loss_tolerance: f64,
    pub network_tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 100,
            networks: 5,
            h: 1e-5,
            kink: 1e-3,
            loss_tolerance: 1e-5,
            network_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub name: String,
    pub configs: usize,
    /// Largest parameter count (or feature count) among the checked configurations.
    pub max_params: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Renders the table as `name,configs,max_params,max_rel_err,tolerance,status`.
pub fn table_csv(rows: &[GradcheckRow]) -> String {
    let mut out = String::from("name,configs,max_params,max_rel_err,tolerance,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            r.name,
            r.configs,
            r.max_params,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    out
}

const MAX_ATTEMPTS_PER_CONFIG: usize = 1000;

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gauss_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, gauss(rng, rows * cols, scale)).expect("sized")
}

/// Draws configurations with `draw` until `configs` are accepted and keeps the
/// worst error. `draw` returns `None` for rejected points.
fn collect<F>(name: &str, configs: usize, tolerance: f64, mut draw: F) -> Result<GradcheckRow>
where
    F: FnMut() -> Result<Option<(f64, usize)>>,
{
    let mut accepted = 0;
    let mut attempts = 0;
    let mut worst = 0.0f64;
    let mut max_params = 0;
    while accepted < configs {
        attempts += 1;
        if attempts > configs * MAX_ATTEMPTS_PER_CONFIG {
            return Err(Error::InvalidArgument(format!(
                "{name}: too few non-degenerate configurations"
            )));
        }
        if let Some((err, params)) = draw()? {
            accepted += 1;
            worst = worst.max(err);
            max_params = max_params.max(params);
        }
    }
    Ok(GradcheckRow {
        name: name.to_string(),
        configs,
        max_params,
        max_rel_err: worst,
        tolerance,
    })
}

fn random_labels(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..k)).collect()
}

/// TCL w.r.t. the features, at active points away from the hinge and from
/// nearest-negative ties.
pub fn check_tcl(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, reduction: Reduction) -> Result<(f64, usize)> {
    let m = rng.random_range(1..=8);
    let k = rng.random_range(2..=6);
    let d = rng.random_range(1..=5);
    let margin = rng.random_range(0.0..3.0);
    let centers = CenterBank::new(gauss_matrix(rng, k, d, 1.0))?;
    let batch = EmbeddingBatch::with_labels(gauss_matrix(rng, m, d, 1.5), random_labels(rng, m, k))?;
    let fwd = tcl_forward(&batch, &centers, margin, reduction)?;
    if fwd.num_active() == 0 || fwd.min_kink_distance(margin) <= opts.kink {
        return Err(Error::DegenerateBatch("rejected".into()));
    }
    let grad = tcl_backward(&fwd, &batch, &centers)?;
    let err = finite_diff_check(
        |x| {
            let b = batch.with_features(Matrix::from_vec(m, d, x.to_vec())?)?;
            Ok(tcl_forward(&b, &centers, margin, reduction)?.loss)
        },
        grad.as_slice(),
        batch.features().as_slice(),
        opts.h,
    )?;
    Ok((err, m * d))
}

/// Smallest distance to a kink of the triplet objective: a triple hinge at
/// zero or, for batch-hard, a tie in the hardest positive or negative.
pub fn triplet_kink_distance(batch: &EmbeddingBatch<f64>, margin: f64, strategy: TripletStrategy) -> f64 {
    let m = batch.len();
    let f = batch.features();
    let y = batch.labels();
    let dist = |i: usize, j: usize| half_sq_dist_unchecked(f.row(i), f.row(j));
    let mut gap = f64::INFINITY;
    for a in 0..m {
        let pos: Vec<f64> = (0..m).filter(|&p| p != a && y[p] == y[a]).map(|p| dist(a, p)).collect();
        let neg: Vec<f64> = (0..m).filter(|&n| y[n] != y[a]).map(|n| dist(a, n)).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        match strategy {
            TripletStrategy::BatchAll => {
                for &dp in &pos {
                    for &dn in &neg {
                        gap = gap.min((margin + dp - dn).abs());
                    }
                }
            }
            TripletStrategy::BatchHard => {
                let top_two = |v: &[f64], largest: bool| {
                    let mut s = v.to_vec();
                    s.sort_by(|a, b| if largest { b.total_cmp(a) } else { a.total_cmp(b) });
                    (s[0], s.get(1).map_or(f64::INFINITY, |x| (x - s[0]).abs()))
                };
                let (dp, gp) = top_two(&pos, true);
                let (dn, gn) = top_two(&neg, false);
                gap = gap.min(gp).min(gn).min((margin + dp - dn).abs());
            }
        }
    }
    gap
}

pub fn check_triplet(rng: &mut ChaCha8Rng, opts: &GradcheckOptions, strategy: TripletStrategy) -> Result<(f64, usize)> {
    let m = rng.random_range(3..=8);
    let k = rng.random_range(2..=3);
    let d = rng.random_range(1..=4);
    let margin = rng.random_range(0.0..3.0);
    let batch = EmbeddingBatch::with_labels(gauss_matrix(rng, m, d, 1.0), random_labels(rng, m, k))?;
    let res = match triplet_loss(&batch, margin, strategy) {
        Ok(r) => r,
        Err(Error::DegenerateBatch(_)) => return Err(Error::DegenerateBatch("rejected".into())),
        Err(e) => return Err(e),
    };
    if res.loss <= 0.0 || triplet_kink_distance(&batch, margin, strategy) <= opts.kink {
        return Err(Error::DegenerateBatch("rejected".into()));
    }
    let grad = res.grad_features.expect("triplet loss yields a feature gradient");
    let err = finite_diff_check(
        |x| {
            let b = batch.with_features(Matrix::from_vec(m, d, x.to_vec())?)?;
            Ok(triplet_loss(&b, margin, strategy)?.loss)
        },
        grad.as_slice(),
        batch.features().as_slice(),
        opts.h,
    )?;
    Ok((err, m * d))
}

pub fn check_center(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let m = rng.random_range(1..=8);
    let k = rng.random_range(2..=6);
    let d = rng.random_range(1..=5);
    let reduction = if rng.random_bool(0.5) {
        Reduction::Sum
    } else {
        Reduction::Mean
    };
    let centers = CenterBank::new(gauss_matrix(rng, k, d, 1.0))?;
    let batch = EmbeddingBatch::with_labels(gauss_matrix(rng, m, d, 1.5), random_labels(rng, m, k))?;
    let grad = center_loss(&batch, &centers, reduction)?
        .grad_features
        .expect("center loss yields a feature gradient");
    let err = finite_diff_check(
        |x| {
            let b = batch.with_features(Matrix::from_vec(m, d, x.to_vec())?)?;
            Ok(center_loss(&b, &centers, reduction)?.loss)
        },
        grad.as_slice(),
        batch.features().as_slice(),
        opts.h,
    )?;
    Ok((err, m * d))
}

pub fn check_softmax(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<(f64, usize)> {
    let m = rng.random_range(1..=8);
    let k = rng.random_range(2..=6);
    let labels = random_labels(rng, m, k);
    let logits = gauss_matrix(rng, m, k, 3.0);
    let grad = softmax_ce(&logits, &labels)?
        .grad_logits
        .expect("softmax yields a logit gradient");
    let err = finite_diff_check(
        |x| Ok(softmax_ce(&Matrix::from_vec(m, k, x.to_vec())?, &labels)?.loss),
        grad.as_slice(),
        logits.as_slice(),
        opts.h,
    )?;
    Ok((err, m * k))
}

/// A small random network with a mixed-domain batch and fixed centers.
pub struct ToyProblem {
    pub params: NetworkParams<f64>,
    pub centers: CenterBank<f64>,
    pub objects: Vec<MultiViewObject>,
    pub cfg: LossConfig,
}

impl ToyProblem {
    pub fn random(rng: &mut ChaCha8Rng) -> Result<Self> {
        let dims = NetworkDims {
            input_dim: 8,
            encoder_widths: vec![16, 12],
            head_hidden: vec![12],
            embedding_dim: 6,
            num_classes: 4,
            num_domains: 2,
        };
        let params = init_params(rng.random(), &dims, 0.4)?;
        let mut params = params;
        params.for_each_array_mut(|_, a| {
            for v in a.iter_mut().filter(|v| **v == 0.0) {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        });
        let centers = CenterBank::new(gauss_matrix(rng, 4, 6, 1.0))?;
        let objects = (0..8)
            .map(|i| {
                let domain = usize::from(i >= 5);
                let views = if domain == 0 { 3 } else { 1 };
                MultiViewObject {
                    id: format!("toy-{i}"),
                    class: i % 4,
                    subcat: 0,
                    domain,
                    views: gauss_matrix(rng, views, 8, 1.0),
                }
            })
            .collect();
        let cfg = LossConfig {
            kind: LossKind::TclSoftmax,
            margin: rng.random_range(0.5..2.0),
            lambda: 0.5,
            ..LossConfig::default()
        };
        Ok(Self {
            params,
            centers,
            objects,
            cfg,
        })
    }

    fn forward_all(&self, params: &NetworkParams<f64>, inputs: &[Matrix<f64>]) -> Result<Vec<ForwardTrace<f64>>> {
        self.objects
            .iter()
            .zip(inputs)
            .map(|(o, x)| forward_object(x, o.domain, params))
            .collect()
    }

    fn batch(&self, traces: &[ForwardTrace<f64>]) -> Result<(EmbeddingBatch<f64>, Matrix<f64>)> {
        let emb = Matrix::from_rows(&traces.iter().map(|t| t.embedding.clone()).collect::<Vec<_>>())?;
        let logits = Matrix::from_rows(&traces.iter().map(|t| t.logits.clone()).collect::<Vec<_>>())?;
        let labels = self.objects.iter().map(|o| o.class).collect();
        Ok((EmbeddingBatch::with_labels(emb, labels)?, logits))
    }

    /// Joint loss for the given parameters and inputs.
    pub fn loss(&self, params: &NetworkParams<f64>, inputs: &[Matrix<f64>]) -> Result<f64> {
        let traces = self.forward_all(params, inputs)?;
        let (batch, logits) = self.batch(&traces)?;
        Ok(combined_loss(&batch, Some(&logits), Some(&self.centers), &self.cfg)?.loss)
    }

    pub fn inputs(&self) -> Vec<Matrix<f64>> {
        self.objects.iter().map(|o| o.views.clone()).collect()
    }

    /// Distance of the current point to the nearest kink of the whole
    /// objective (ReLU, pooling, hinge, nearest-negative tie).
    pub fn kink_distance(&self) -> Result<f64> {
        let traces = self.forward_all(&self.params, &self.inputs())?;
        let (batch, _) = self.batch(&traces)?;
        let fwd = tcl_forward(&batch, &self.centers, self.cfg.margin, self.cfg.reduction)?;
        let net = traces
            .iter()
            .map(|t| t.min_kink_distance())
            .fold(f64::INFINITY, f64::min);
        Ok(net.min(fwd.min_kink_distance(self.cfg.margin)))
    }

    /// Analytic gradients w.r.t. the flattened parameters and the flattened inputs.
    pub fn analytic(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let traces = self.forward_all(&self.params, &self.inputs())?;
        let (batch, logits) = self.batch(&traces)?;
        let r = combined_loss(&batch, Some(&logits), Some(&self.centers), &self.cfg)?;
        let g = backward_batch(&traces, r.grad_features.as_ref(), r.grad_logits.as_ref(), &self.params)?;
        let inputs = g.inputs.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        Ok((g.params.flatten(), inputs))
    }
}

/// Network gradient checks: `(params error, inputs error, parameter count)`.
pub fn check_network(rng: &mut ChaCha8Rng, opts: &GradcheckOptions) -> Result<(f64, f64, usize)> {
    let toy = ToyProblem::random(rng)?;
    if toy.kink_distance()? <= opts.kink {
        return Err(Error::DegenerateBatch("rejected".into()));
    }
    let (g_params, g_inputs) = toy.analytic()?;
    let inputs = toy.inputs();
    let mut scratch = toy.params.clone();
    let param_err = finite_diff_check(
        |x| {
            scratch.assign_flat(x)?;
            toy.loss(&scratch, &inputs)
        },
        &g_params,
        &toy.params.flatten(),
        opts.h,
    )?;

    let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
    let flat_inputs: Vec<f64> = inputs.iter().flat_map(|m| m.as_slice().to_vec()).collect();
    let input_err = finite_diff_check(
        |x| {
            let mut offset = 0;
            let mats = shapes
                .iter()
                .map(|&(r, c)| {
                    let m = Matrix::from_vec(r, c, x[offset..offset + r * c].to_vec());
                    offset += r * c;
                    m
                })
                .collect::<Result<Vec<_>>>()?;
            toy.loss(&toy.params, &mats)
        },
        &g_inputs,
        &flat_inputs,
        opts.h,
    )?;
    Ok((param_err, input_err, toy.params.num_params()))
}

fn accept(r: Result<(f64, usize)>) -> Result<Option<(f64, usize)>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateBatch(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Runs every check and returns one row per loss and per network target.
pub fn gradcheck_table(opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.configs;
    let tol = opts.loss_tolerance;
    let mut rows = vec![
        collect("tcl/sum", n, tol, || accept(check_tcl(&mut rng, opts, Reduction::Sum)))?,
        collect("tcl/mean", n, tol, || {
            accept(check_tcl(&mut rng, opts, Reduction::Mean))
        })?,
        collect("triplet/batch-all", n, tol, || {
            accept(check_triplet(&mut rng, opts, TripletStrategy::BatchAll))
        })?,
        collect("triplet/batch-hard", n, tol, || {
            accept(check_triplet(&mut rng, opts, TripletStrategy::BatchHard))
        })?,
        collect("center", n, tol, || accept(check_center(&mut rng, opts)))?,
        collect("softmax", n, tol, || accept(check_softmax(&mut rng, opts)))?,
    ];

    let mut input_worst = 0.0f64;
    let params_row = collect(
        "network/params",
        opts.networks,
        opts.network_tolerance,
        || match check_network(&mut rng, opts) {
            Ok((p, i, n)) => {
                input_worst = input_worst.max(i);
                Ok(Some((p, n)))
            }
            Err(Error::DegenerateBatch(_)) => Ok(None),
            Err(e) => Err(e),
        },
    )?;
    let inputs_row = GradcheckRow {
        name: "network/inputs".to_string(),
        max_rel_err: input_worst,
        ..params_row.clone()
    };
    rows.push(params_row);
    rows.push(inputs_row);
    Ok(rows)
}
