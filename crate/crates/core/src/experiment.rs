//! Config-driven runs: dataset generation, training with artifacts,
//! embedding export, evaluation, and the multi-seed comparison and sweep
//! studies. The command-line front end is a thin wrapper over this module.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepParameter};
use crate::data::{self, MultiViewObject, Split};
use crate::error::{Error, Result};
use crate::linalg::{sq_norm_diff, Matrix};
use crate::losses::{CenterBank, LossKind};
use crate::model::{init_params, NetworkDims};
use crate::retrieval::{evaluate, EmbeddingSet, EvalOptions, MetricReport};
use crate::train::{embed_objects, train, Model, TrainOptions, TrainRunStats};

pub const CHECKPOINT_FORMAT: &str = "tclab-checkpoint/1";

const CENTER_SEED_SALT: u64 = 0x6a09_e667_f3bc_c909;
const BATCH_SEED_SALT: u64 = 0xbb67_ae85_84ca_a73b;

/// Seeds of the three independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub params: u64,
    pub centers: u64,
    pub batches: u64,
}

impl RunSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            params: seed,
            centers: seed ^ CENTER_SEED_SALT,
            batches: seed ^ BATCH_SEED_SALT,
        }
    }
}

/// The dataset named by the config: loaded from `dataset_path` or generated.
pub fn dataset_for(cfg: &ExperimentConfig) -> Result<Split> {
    match &cfg.dataset_path {
        Some(path) => data::load(path),
        None => data::generate(&cfg.dataset),
    }
}

/// Freshly initialised weights and centers for `seed`.
pub fn build_model(cfg: &ExperimentConfig, dims: &NetworkDims, seed: u64) -> Result<Model<f64>> {
    dims.validate()?;
    let seeds = RunSeeds::from_seed(seed);
    let params = init_params(seeds.params, dims, cfg.model.init_std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.centers);
    let centers = CenterBank::gaussian(dims.num_classes, dims.embedding_dim, cfg.centers.init_std, &mut rng)?;
    Ok(Model { params, centers })
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub initial: Model<f64>,
    pub model: Model<f64>,
    pub stats: TrainRunStats,
    pub report: MetricReport,
    /// Compactness of the test embeddings before and after training.
    pub compactness_initial: Compactness,
    pub compactness_final: Compactness,
}

/// Trains one model with `cfg` (using `seed`) and evaluates it on the test split.
pub fn run(cfg: &ExperimentConfig, split: &Split, seed: u64) -> Result<RunOutcome> {
    let dims = cfg.network_dims(&split.spec);
    let initial = build_model(cfg, &dims, seed)?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: RunSeeds::from_seed(seed).batches,
    };
    let (model, stats) = train(
        initial.clone(),
        &split.train,
        &cfg.loss,
        &cfg.optimizer,
        &cfg.centers,
        &opts,
    )?;
    let cross = split.spec.domains > 1;
    let report = evaluate_split(&model, split, cross, &cfg.eval)?;
    let compactness_initial = compactness(&initial, &split.test)?;
    let compactness_final = compactness(&model, &split.test)?;
    Ok(RunOutcome {
        seed,
        initial,
        model,
        stats,
        report,
        compactness_initial,
        compactness_final,
    })
}

/// Embeddings of the test split.
pub fn test_embeddings(model: &Model<f64>, split: &Split) -> Result<EmbeddingSet> {
    embedding_set(model, &split.test)
}

pub fn embedding_set(model: &Model<f64>, objects: &[MultiViewObject]) -> Result<EmbeddingSet> {
    let feats = embed_objects(&model.params, objects)?;
    EmbeddingSet::from_objects(objects, feats)
}

/// Retrieval on the test split.
///
/// Within-domain: domain-0 items query the other domain-0 items.
/// Cross-domain: domain-1 items query the domain-0 items.
pub fn evaluate_embeddings(set: &EmbeddingSet, cross_domain: bool, opts: &EvalOptions) -> Result<MetricReport> {
    let database = set.domain(0);
    if database.is_empty() {
        return Err(Error::InvalidArgument("no domain-0 items to retrieve from".into()));
    }
    if cross_domain {
        let queries = set.domain(1);
        if queries.is_empty() {
            return Err(Error::InvalidArgument(
                "cross-domain evaluation needs domain-1 items".into(),
            ));
        }
        evaluate(&queries, &database, opts)
    } else {
        evaluate(&database, &database, opts)
    }
}

pub fn evaluate_split(
    model: &Model<f64>,
    split: &Split,
    cross_domain: bool,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    evaluate_embeddings(&test_embeddings(model, split)?, cross_domain, opts)
}

/// Mean Euclidean distance of embeddings to their own class center divided by
/// the mean distance to the nearest other center.
pub fn compactness_ratio(features: &Matrix<f64>, classes: &[usize], centers: &Matrix<f64>) -> Result<f64> {
    if features.rows() != classes.len() || features.rows() == 0 {
        return Err(Error::InvalidArgument(
            "compactness needs one class per embedding".into(),
        ));
    }
    if centers.rows() < 2 || centers.cols() != features.cols() {
        return Err(Error::InvalidArgument(
            "compactness needs >= 2 centers of the embedding width".into(),
        ));
    }
    let (mut own, mut other) = (0.0, 0.0);
    for (f, &y) in features.row_iter().zip(classes) {
        own += sq_norm_diff(f, centers.row(y)).sqrt();
        other += (0..centers.rows())
            .filter(|&j| j != y)
            .map(|j| sq_norm_diff(f, centers.row(j)).sqrt())
            .fold(f64::INFINITY, f64::min);
    }
    if other == 0.0 {
        return Err(Error::NonFinite("compactness ratio with zero denominator".into()));
    }
    Ok(own / other)
}

/// Per-class mean of the rows of `features`.
pub fn class_centroids(features: &Matrix<f64>, classes: &[usize], num_classes: usize) -> Result<Matrix<f64>> {
    let mut sums = Matrix::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (f, &y) in features.row_iter().zip(classes) {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes });
        }
        counts[y] += 1;
        sums.row_mut(y).iter_mut().zip(f).for_each(|(s, v)| *s += v);
    }
    for (j, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InvalidArgument(format!("class {j} has no embeddings")));
        }
        sums.row_mut(j).iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(sums)
}

/// Compactness of domain-0 test embeddings, measured against the learned
/// centers and against the empirical class centroids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compactness {
    pub learned_centers: f64,
    pub centroids: f64,
}

pub fn compactness(model: &Model<f64>, objects: &[MultiViewObject]) -> Result<Compactness> {
    let shapes: Vec<MultiViewObject> = objects.iter().filter(|o| o.domain == 0).cloned().collect();
    let set = embedding_set(model, &shapes)?;
    let k = model.centers.num_classes();
    let centroids = class_centroids(&set.features, &set.classes, k)?;
    Ok(Compactness {
        learned_centers: compactness_ratio(&set.features, &set.classes, model.centers.centers())?,
        centroids: compactness_ratio(&set.features, &set.classes, &centroids)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub dims: NetworkDims,
    pub seed: u64,
    pub init_std: f64,
    pub model: Model<f64>,
}

impl Checkpoint {
    pub fn new(dims: NetworkDims, seed: u64, init_std: f64, model: Model<f64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            dims,
            seed,
            init_std,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(
            path,
            &serde_json::to_string_pretty(self).expect("checkpoint is serialisable"),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("unsupported checkpoint format `{}`", ck.format),
            });
        }
        ck.model
            .params
            .check_shape(&crate::model::NetworkParams::zeros(&ck.dims)?)?;
        if ck.model.centers.num_classes() != ck.dims.num_classes || ck.model.centers.dim() != ck.dims.embedding_dim {
            return Err(Error::InvalidArgument(
                "checkpoint centers do not match its dims".into(),
            ));
        }
        Ok(ck)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the dataset described by `cfg` to `out`.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Split> {
    let split = data::generate(&cfg.dataset)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    data::save(&split, out)?;
    Ok(split)
}

/// Paths written by [`cmd_train`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub centers: PathBuf,
    pub loss_curve: PathBuf,
    pub embeddings: PathBuf,
    pub metrics: PathBuf,
    pub resolved_config: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.json"),
            centers: dir.join("centers.json"),
            loss_curve: dir.join("loss_curve.csv"),
            embeddings: dir.join("embeddings.csv"),
            metrics: dir.join("metrics.json"),
            resolved_config: dir.join("config.resolved.toml"),
        }
    }

    pub fn all(&self) -> [&Path; 6] {
        [
            &self.checkpoint,
            &self.centers,
            &self.loss_curve,
            &self.embeddings,
            &self.metrics,
            &self.resolved_config,
        ]
    }
}

/// Trains with `cfg.seed` and writes checkpoint, centers, loss curve, test
/// embeddings, metric report and the resolved config into `cfg.out_dir`.
pub fn cmd_train(cfg: &ExperimentConfig, pca2: bool) -> Result<(TrainArtifacts, RunOutcome)> {
    cfg.validate()?;
    let split = dataset_for(cfg)?;
    let outcome = run(cfg, &split, cfg.seed)?;
    let dir = &cfg.out_dir;
    ensure_dir(dir)?;
    let art = TrainArtifacts::in_dir(dir);
    let dims = cfg.network_dims(&split.spec);
    Checkpoint::new(dims, cfg.seed, cfg.model.init_std, outcome.model.clone()).save(&art.checkpoint)?;
    write_file(
        &art.centers,
        &serde_json::to_string_pretty(&outcome.model.centers).expect("centers are serialisable"),
    )?;
    write_file(&art.loss_curve, &outcome.stats.to_csv())?;
    test_embeddings(&outcome.model, &split)?.write_csv(&art.embeddings, pca2)?;
    write_file(&art.metrics, &outcome.report.to_json())?;
    write_file(&art.resolved_config, &cfg.to_toml())?;
    Ok((art, outcome))
}

/// Test-split embeddings of a checkpoint, written as CSV.
pub fn cmd_embed(checkpoint: &Path, split: &Split, out: &Path, pca2: bool) -> Result<EmbeddingSet> {
    let ck = Checkpoint::load(checkpoint)?;
    let set = test_embeddings(&ck.model, split)?;
    set.write_csv(out, pca2)?;
    Ok(set)
}

/// One row of the loss comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub loss: LossKind,
    pub auc: f64,
    pub map: f64,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auc: f64,
    pub map: f64,
    pub compactness_initial: Compactness,
    pub compactness_final: Compactness,
    pub skipped_batches: usize,
}

impl SeedResult {
    fn from_outcome(o: &RunOutcome) -> Result<Self> {
        let get = |name: &str| {
            o.report
                .micro(name)
                .ok_or_else(|| Error::InvalidArgument(format!("metric `{name}` missing from report")))
        };
        Ok(Self {
            seed: o.seed,
            auc: get("auc")?,
            map: get("map")?,
            compactness_initial: o.compactness_initial,
            compactness_final: o.compactness_final,
            skipped_batches: o.stats.skipped_batches,
        })
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn with_pool<R: Send>(parallel: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every `(variant, seed)` pair; `parallel` runs execute at once.
fn run_grid(variants: &[ExperimentConfig], split: &Split, parallel: usize) -> Result<Vec<Vec<SeedResult>>> {
    let jobs: Vec<(usize, u64)> = variants
        .iter()
        .enumerate()
        .flat_map(|(v, cfg)| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_job = |&(v, seed): &(usize, u64)| run(&variants[v], split, seed).and_then(|o| SeedResult::from_outcome(&o));
    let results: Vec<Result<SeedResult>> = if parallel <= 1 {
        jobs.iter().map(run_job).collect()
    } else {
        with_pool(parallel, || jobs.par_iter().map(run_job).collect())?
    };
    let mut grouped: Vec<Vec<SeedResult>> = vec![Vec::new(); variants.len()];
    for (&(v, _), r) in jobs.iter().zip(results) {
        grouped[v].push(r?);
    }
    Ok(grouped)
}

/// Loss comparison: one row per `compare.kinds`, mean test AUC and mAP over
/// `seeds`. Writes `compare.csv`, `compare.json` and the resolved config.
pub fn cmd_compare(cfg: &ExperimentConfig, parallel: usize) -> Result<Vec<CompareRow>> {
    cfg.validate()?;
    let split = dataset_for(cfg)?;
    let variants: Vec<ExperimentConfig> = cfg
        .compare
        .kinds
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.loss.kind = kind;
            c
        })
        .collect();
    for v in &variants {
        v.validate()?;
    }
    let grouped = run_grid(&variants, &split, parallel)?;
    let rows: Vec<CompareRow> = cfg
        .compare
        .kinds
        .iter()
        .zip(grouped)
        .map(|(&loss, per_seed)| CompareRow {
            loss,
            auc: mean(per_seed.iter().map(|s| s.auc)),
            map: mean(per_seed.iter().map(|s| s.map)),
            per_seed,
        })
        .collect();

    ensure_dir(&cfg.out_dir)?;
    let mut csv = String::from("loss,auc,map\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.loss, r.auc, r.map));
    }
    write_file(&cfg.out_dir.join("compare.csv"), &csv)?;
    write_file(
        &cfg.out_dir.join("compare.json"),
        &serde_json::to_string_pretty(&rows).expect("rows are serialisable"),
    )?;
    write_file(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: SweepParameter,
    pub value: f64,
    pub auc: f64,
    pub map: f64,
    pub per_seed: Vec<SeedResult>,
}

/// Parameter study of `sweep.parameter` over `sweep.values` with the
/// configured loss. Writes `sweep.csv`, `sweep.json` and the resolved config.
pub fn cmd_sweep(cfg: &ExperimentConfig, parallel: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.sweep.values.is_empty() {
        return Err(Error::Config("sweep.values must not be empty".into()));
    }
    let split = dataset_for(cfg)?;
    let variants = cfg
        .sweep
        .values
        .iter()
        .map(|&value| {
            let mut c = cfg.clone();
            match cfg.sweep.parameter {
                SweepParameter::Lambda => c.loss.lambda = value,
                SweepParameter::Margin => c.loss.margin = value,
            }
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    let grouped = run_grid(&variants, &split, parallel)?;
    let rows: Vec<SweepRow> = cfg
        .sweep
        .values
        .iter()
        .zip(grouped)
        .map(|(&value, per_seed)| SweepRow {
            parameter: cfg.sweep.parameter,
            value,
            auc: mean(per_seed.iter().map(|s| s.auc)),
            map: mean(per_seed.iter().map(|s| s.map)),
            per_seed,
        })
        .collect();

    ensure_dir(&cfg.out_dir)?;
    let mut csv = format!("{},auc,map\n", cfg.sweep.parameter.as_str());
    for r in &rows {
        csv.push_str(&format!("{},{},{}\n", r.value, r.auc, r.map));
    }
    write_file(&cfg.out_dir.join("sweep.csv"), &csv)?;
    write_file(
        &cfg.out_dir.join("sweep.json"),
        &serde_json::to_string_pretty(&rows).expect("rows are serialisable"),
    )?;
    write_file(&cfg.out_dir.join("config.resolved.toml"), &cfg.to_toml())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compactness_hand_value() {
        let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let feats = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]).unwrap();
        // own distances 1 and 1, nearest other 3 and 3
        let r = compactness_ratio(&feats, &[0, 1], &centers).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn centroids_are_class_means() {
        let feats = Matrix::from_rows(&[vec![1.0], vec![3.0], vec![10.0]]).unwrap();
        let c = class_centroids(&feats, &[0, 0, 1], 2).unwrap();
        assert_eq!(c.as_slice(), &[2.0, 10.0]);
        assert!(class_centroids(&feats, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn run_seeds_are_distinct_streams() {
        let s = RunSeeds::from_seed(7);
        assert_ne!(s.params, s.centers);
        assert_ne!(s.params, s.batches);
        assert_ne!(s.centers, s.batches);
    }
}
