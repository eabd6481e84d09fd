use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid attribute name {0:?}: must be non-empty and contain no whitespace")]
    InvalidAttribute(String),

    #[error("operator {op} expects {expected} operand(s), got {got}")]
    OperandArity {
        op: &'static str,
        expected: &'static str,
        got: usize,
    },

    #[error("unknown constraint operator {0:?}")]
    UnknownOperator(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("vector of length {vector} cannot be aligned to a registry of length {registry}")]
    Align { vector: usize, registry: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("inconsistent model state: {0}")]
    ModelState(String),

    #[error("cannot shrink input layer from {current} to {requested} features")]
    Shrink { current: usize, requested: usize },

    #[error("classifier input width {model} does not match registry length {registry}")]
    ClassifierMismatch { model: usize, registry: usize },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
