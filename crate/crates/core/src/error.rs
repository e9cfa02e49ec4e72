use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid histogram: {0}")]
    InvalidHistogram(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("patch set is empty")]
    EmptyPatchSet,

    #[error("patch of side {patch} does not fit in a {width}x{height} image")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },

    #[error("input side {side} is below the scorer minimum of {min}")]
    InputTooSmall { side: usize, min: usize },

    #[error("state error: {0}")]
    StateError(String),

    #[error("series has zero variance")]
    DegenerateSeries,

    #[error("dataset is empty or too small: {0}")]
    EmptyDataset(String),

    #[error("{path}:{line}: parse error: {message}")]
    ParseError {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: schema error: {message}")]
    SchemaError {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("cannot decode {path}: {message}")]
    DecodeError { path: PathBuf, message: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training interrupted at epoch {epoch}")]
    Interrupted { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn mismatch(expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { expected, actual }
    }
}
