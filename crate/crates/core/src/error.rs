use thiserror::Error;

/// Errors surfaced by model construction, data handling and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("channel count {channels} not divisible by {divisor} in {context}")]
    NotDivisible {
        context: String,
        channels: usize,
        divisor: usize,
    },

    #[error("spatial mismatch: {context}: {left} vs {right}")]
    SpatialMismatch {
        context: String,
        left: String,
        right: String,
    },

    #[error("no pyramid level with downsample rate {rate} (available: {available:?})")]
    ScaleAlignment { rate: usize, available: Vec<usize> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("labels contain a single class; metric undefined")]
    SingleClass,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("manifest row {row}: {reason}")]
    Manifest { row: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("unknown layer {0:?}")]
    UnknownLayer(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {reason}")]
    Image { path: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
