//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the tensor engine.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, buffer holds {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Model / run configuration problems. Collects every issue so that a bad
/// config is reported in one pass.
#[derive(Debug, Error)]
#[error("invalid configuration:\n{}", issues.join("\n"))]
pub struct ConfigError {
    pub issues: Vec<String>,
}

impl ConfigError {
    pub fn new(issues: Vec<String>) -> Self {
        ConfigError { issues }
    }
}

/// Dataset generation, manifest and image loading errors.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}, line {line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unreadable image {path}: {msg}")]
    BadImage { path: String, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
}

/// Checkpoint serialization errors.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset 0: expected \"SWKT\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("truncated checkpoint at offset {offset}: {what}")]
    Truncated { offset: u64, what: &'static str },
    #[error("malformed checkpoint at offset {offset}: {msg}")]
    Malformed { offset: u64, msg: String },
    #[error("metadata block is not valid JSON: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("checkpoint/model mismatch: {0}")]
    ParamMismatch(String),
}

/// Model construction errors.
#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Evaluation and interpretation errors.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot compute metrics over an empty prediction set")]
    Empty,
    #[error("non-finite logit encountered during fusion: {0}")]
    NonFiniteLogit(f32),
    #[error("t-SNE needs at least {needed} points for perplexity {perplexity}, got {n}")]
    TooFewPoints {
        n: usize,
        needed: usize,
        perplexity: f64,
    },
    #[error("embedding dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Training-time errors.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyDataset,
    #[error("unknown experiment id {0} (valid: 1..=5)")]
    UnknownExperiment(u8),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
