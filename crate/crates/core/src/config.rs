//! JSON experiment configuration.
//!
//! Unknown keys are rejected. Every random stream is derived from the single
//! top-level `seed`; there is no wall-clock seeding.
//!
//! ```json
//! {
//!   "method": "pfedcfr",
//!   "seed": 0,
//!   "model": { "widths": [20, 32, 8], "feature_layers": 1 },
//!   "data": { "synthetic": { "num_clusters": 2, "samples_per_class": 150,
//!                            "dim": 20, "num_classes": 8 } },
//!   "partition": { "num_clients": 8, "labels_per_client": 2,
//!                  "lognormal_sigma": 0.5, "train_ratio": 0.75 },
//!   "training": { "rounds": 30, "local_steps": 10, "batch_size": 32,
//!                 "eta": 0.005, "alpha_t": 1e4, "sigma": 1e6,
//!                 "lambda": 1.0, "mu": 0.001 },
//!   "output_dir": "out"
//! }
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_idx, partition_heterogeneous, ClientShard, Dataset, PartitionConfig, SyntheticConfig,
};
use crate::fusion::SimilarityParams;
use crate::nn::ModelSpec;
use crate::runtime::{Method, MethodConfig};
use crate::seed::{derive_seed, SeedStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSource,
    pub partition: PartitionSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Input width, hidden widths, class count.
    pub widths: Vec<usize>,
    /// Leading feature-role layers; defaults to all but the last layer.
    #[serde(default)]
    pub feature_layers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Idx(IdxSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only the first `limit` samples.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub labels_per_client: usize,
    pub lognormal_sigma: f64,
    pub train_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub rounds: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_alpha_t")]
    pub alpha_t: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Personalized-layer threshold `r` (pfedcfr only).
    #[serde(default)]
    pub threshold: Option<usize>,
    #[serde(default)]
    pub overwrite_personalized: bool,
}

fn default_local_steps() -> usize {
    10
}
fn default_batch_size() -> usize {
    32
}
fn default_eta() -> f64 {
    0.005
}
fn default_alpha_t() -> f64 {
    SimilarityParams::default().alpha_t
}
fn default_sigma() -> f64 {
    SimilarityParams::default().sigma
}
fn default_lambda() -> f64 {
    SimilarityParams::default().lambda
}
fn default_mu() -> f64 {
    SimilarityParams::default().mu
}

/// A configuration problem, tagged with the offending field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Model, client shards and method ready to simulate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub shards: Vec<ClientShard>,
    pub method: MethodConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let field = if field == "." { String::new() } else { field };
            ConfigError::new(field, e.into_inner().to_string())
        })
    }

    pub fn depth(&self) -> usize {
        self.model.widths.len().saturating_sub(1)
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        let depth = self.depth();
        let feature_layers = self.model.feature_layers.unwrap_or(depth.saturating_sub(1));
        if feature_layers > depth {
            return Err(ConfigError::new(
                "model.feature_layers",
                format!("{feature_layers} exceeds model depth {depth}"),
            ));
        }
        ModelSpec::mlp(&self.model.widths, feature_layers).map_err(|e| ConfigError::new("model.widths", e.to_string()))
    }

    pub fn method_config(&self) -> MethodConfig {
        let t = &self.training;
        MethodConfig {
            method: self.method,
            similarity: SimilarityParams {
                alpha_t: t.alpha_t,
                sigma: t.sigma,
                lambda: t.lambda,
                mu: t.mu,
            },
            threshold: t.threshold,
            local_steps: t.local_steps,
            batch_size: t.batch_size,
            eta: t.eta,
            rounds: t.rounds,
            seed: self.seed,
            overwrite_personalized: t.overwrite_personalized,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        let p = &self.partition;
        PartitionConfig {
            num_clients: p.num_clients,
            labels_per_client: p.labels_per_client,
            lognormal_sigma: p.lognormal_sigma,
            seed: derive_seed(self.seed, SeedStream::Partition, 0),
            train_ratio: p.train_ratio,
            random_factor: true,
        }
    }

    /// Static checks that need no data loading.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let model = self.model_spec()?;
        match &self.data {
            DataSource::Synthetic(s) => {
                s.validate()
                    .map_err(|e| ConfigError::new("data.synthetic", e.to_string()))?;
                if s.dim != model.input_dim() {
                    return Err(ConfigError::new(
                        "model.widths",
                        format!(
                            "input width {} does not match data.synthetic.dim {}",
                            model.input_dim(),
                            s.dim
                        ),
                    ));
                }
                if s.num_classes != model.num_classes() {
                    return Err(ConfigError::new(
                        "model.widths",
                        format!(
                            "output width {} does not match data.synthetic.num_classes {}",
                            model.num_classes(),
                            s.num_classes
                        ),
                    ));
                }
            }
            DataSource::Idx(idx) => {
                for (field, path) in [("data.idx.images", &idx.images), ("data.idx.labels", &idx.labels)] {
                    if !path.is_file() {
                        return Err(ConfigError::new(field, format!("file not found: {}", path.display())));
                    }
                }
                if idx.limit == Some(0) {
                    return Err(ConfigError::new("data.idx.limit", "must be >= 1"));
                }
            }
        }
        let classes = match &self.data {
            DataSource::Synthetic(s) => s.num_classes,
            DataSource::Idx(_) => model.num_classes(),
        };
        self.partition_config()
            .validate(classes)
            .map_err(|e| ConfigError::new("partition", e.to_string()))?;
        let method = self.method_config();
        method
            .validate()
            .map_err(|e| ConfigError::new("training", e.to_string()))?;
        if let Some(r) = self.training.threshold {
            if r > model.depth() {
                return Err(ConfigError::new(
                    "training.threshold",
                    format!("r={r} exceeds model depth {}", model.depth()),
                ));
            }
        }
        Ok(())
    }

    /// Loads or generates the dataset.
    pub fn load_dataset(&self) -> crate::Result<Dataset> {
        match &self.data {
            DataSource::Synthetic(s) => gen_synthetic(s, derive_seed(self.seed, SeedStream::Data, 0)),
            DataSource::Idx(idx) => {
                let ds = load_idx(&idx.images, &idx.labels)?;
                Ok(match idx.limit {
                    Some(n) => ds.head(n),
                    None => ds,
                })
            }
        }
    }

    /// Validates, loads data and partitions it.
    pub fn prepare(&self) -> Result<Prepared, PrepareError> {
        self.validate().map_err(PrepareError::Config)?;
        let model = self.model_spec().map_err(PrepareError::Config)?;
        let ds = self.load_dataset().map_err(PrepareError::Runtime)?;
        if ds.dim() != model.input_dim() {
            return Err(PrepareError::Config(ConfigError::new(
                "model.widths",
                format!(
                    "input width {} does not match data dimension {}",
                    model.input_dim(),
                    ds.dim()
                ),
            )));
        }
        if ds.num_classes() > model.num_classes() {
            return Err(PrepareError::Config(ConfigError::new(
                "model.widths",
                format!(
                    "output width {} is smaller than the {} data classes",
                    model.num_classes(),
                    ds.num_classes()
                ),
            )));
        }
        let shards = partition_heterogeneous(&ds, &self.partition_config()).map_err(PrepareError::Runtime)?;
        Ok(Prepared {
            model,
            shards,
            method: self.method_config(),
        })
    }
}

#[derive(Debug)]
pub enum PrepareError {
    Config(ConfigError),
    Runtime(crate::Error),
}
