use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },

    #[error("shape mismatch in {file}: expected {expected}, found {found}")]
    ShapeMismatch {
        file: String,
        expected: String,
        found: String,
    },

    #[error("non-finite entry in {file} at row {row}, column {col}")]
    NonFinite { file: String, row: usize, col: usize },

    #[error("npy format error in {file}: {reason}")]
    Npy { file: String, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("numerically degenerate: {0}")]
    Degenerate(String),

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: 2 for bad input, 3 for degenerate numerics.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_) => 3,
            _ => 2,
        }
    }
}
