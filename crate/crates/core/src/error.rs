use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced by the simulation library.
///
/// Layer indices carried by variants are 1-based.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch at layer {layer}: expected {expected}, found {found}")]
    ShapeMismatch {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("non-finite loss {value}")]
    NonFiniteLoss { value: f64 },

    #[error("training diverged for client {client} at round {round}, step {step}: loss {value}")]
    TrainingDiverged {
        client: usize,
        round: usize,
        step: usize,
        value: f64,
    },

    #[error("fusion threshold r={r} out of range for depth {depth}")]
    ThresholdOutOfRange { r: usize, depth: usize },

    #[error(
        "non-contractive fusion weights for client {client}: off-diagonal sum {off_diagonal_sum} leaves self-weight {self_weight} <= 0"
    )]
    NonContractiveWeights {
        client: usize,
        off_diagonal_sum: f64,
        self_weight: f64,
    },

    #[error("fusion failed at layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("need at least {needed} clients, got {got}")]
    TooFewClients { needed: usize, got: usize },

    #[error("invalid similarity parameters: {0}")]
    InvalidSimilarity(String),

    #[error("missing penalty target for layer {layer}")]
    MissingTarget { layer: usize },

    #[error("{path}: bad magic number at offset 0: expected {expected:#010x}, found {found:#010x}")]
    MagicMismatch { path: PathBuf, expected: u32, found: u32 },

    #[error("{path}: truncated file, needed {needed} bytes at offset {offset}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("image/label count mismatch: {images} images in {images_path}, {labels} labels in {labels_path}")]
    CountMismatch {
        images_path: PathBuf,
        images: usize,
        labels_path: PathBuf,
        labels: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid partition config: {0}")]
    InvalidPartition(String),

    #[error("class {class} has {samples} samples but {holders} holders")]
    InsufficientClassSamples {
        class: usize,
        samples: usize,
        holders: usize,
    },

    #[error("invalid method config: {0}")]
    InvalidMethod(String),
}

impl Error {
    pub(crate) fn at_layer(self, layer: usize) -> Self {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }
}
