use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library. The CLI maps each variant onto an exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input in {path}: {message}")]
    Malformed { path: PathBuf, message: String },

    #[error("duplicate feature name `{0}`")]
    DuplicateFeature(String),

    #[error("column `{feature}` has {found} entries, expected {expected}")]
    ColumnLength {
        feature: String,
        expected: usize,
        found: usize,
    },

    #[error("non-numeric value `{value}` in ordinal column `{feature}`")]
    NonNumericOrdinal { feature: String, value: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index {index} out of bounds for length {len}")]
    IndexOutOfBounds { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("degenerate parameters: {0}")]
    DegenerateParameters(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-finite gradient at step {step} (max |g| = {max_abs})")]
    NonFiniteGradient { step: usize, max_abs: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            message: message.into(),
        }
    }
}
