//! Experiment configuration (TOML).
//!
//! Every table rejects unknown keys. Omitted keys take the defaults below,
//! which follow the published training settings where one exists.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossKind};
use crate::model::NetworkDims;
use crate::optim::{CenterUpdateConfig, SgdConfig};
use crate::retrieval::EvalOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output widths of the per-view encoder layers; the last is the pooled width.
    pub encoder_widths: Vec<usize>,
    /// Hidden widths of the embedding head.
    pub head_hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Standard deviation of the Gaussian weight initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 64],
            head_hidden: vec![64],
            embedding_dim: 64,
            init_std: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParameter {
    Lambda,
    Margin,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParameter::Lambda),
            "m" | "margin" => Ok(SweepParameter::Margin),
            other => Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (lambda or margin)"
            ))),
        }
    }
}

impl SweepParameter {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Margin => "margin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            parameter: SweepParameter::Lambda,
            values: vec![0.0, 0.01, 0.1, 1.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub kinds: Vec<LossKind>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            kinds: vec![
                LossKind::Softmax,
                LossKind::CenterSoftmax,
                LossKind::Triplet,
                LossKind::Tcl,
                LossKind::TclSoftmax,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seed of a single training run (weights, centers, batch order).
    pub seed: u64,
    /// Seeds averaged over by `compare` and `sweep`.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub out_dir: PathBuf,
    /// Load the dataset from this file instead of generating `dataset`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: SgdConfig,
    pub centers: CenterUpdateConfig,
    pub eval: EvalOptions,
    pub sweep: SweepConfig,
    pub compare: CompareConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3],
            epochs: 50,
            batch_size: 16,
            out_dir: PathBuf::from("runs/default"),
            dataset_path: None,
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: SgdConfig::default(),
            centers: CenterUpdateConfig::default(),
            eval: EvalOptions::default(),
            sweep: SweepConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.message().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.loss.kind.needs_pairs() && self.batch_size < 2 {
            return Err(Error::Config("triplet loss needs batch_size >= 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return Err(Error::Config("model.init_std must be finite and >= 0".into()));
        }
        if self.compare.kinds.is_empty() {
            return Err(Error::Config("compare.kinds must not be empty".into()));
        }
        if self.sweep.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("sweep values must be finite and >= 0".into()));
        }
        self.dataset.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.centers.validate()?;
        self.network_dims(&self.dataset).validate()
    }

    /// Network sizes for a dataset with the given spec.
    pub fn network_dims(&self, spec: &DatasetSpec) -> NetworkDims {
        NetworkDims {
            input_dim: spec.view_dim,
            encoder_widths: self.model.encoder_widths.clone(),
            head_hidden: self.model.head_hidden.clone(),
            embedding_dim: self.model.embedding_dim,
            num_classes: spec.num_classes,
            num_domains: spec.domains,
        }
    }
}
