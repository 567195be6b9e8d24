use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DtqError>;

#[derive(Debug, Error)]
pub enum DtqError {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value at index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("unsupported bit-width {0} (expected one of 2, 4, 6, 8)")]
    UnsupportedBits(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected {expected} quantization groups, got {actual}")]
    GroupCount { expected: usize, actual: usize },

    #[error("integer accumulator overflow at row {row}, output channel {col}")]
    AccumulatorOverflow { row: usize, col: usize },

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} for {what} (this build reads version {supported})")]
    Version {
        what: &'static str,
        found: u32,
        supported: u32,
    },

    #[error("truncated {what}: needed {needed} bytes, {available} available")]
    Truncated {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("packed buffer for {count} {bits}-bit codes must be {expected} bytes, found {found}")]
    Packing {
        count: usize,
        bits: u32,
        expected: usize,
        found: usize,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DtqError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        DtqError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DtqError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DtqError::Io {
            path: path.into(),
            source,
        }
    }
}
