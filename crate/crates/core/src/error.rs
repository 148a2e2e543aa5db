use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("entry {position}: index {index} out of range for mode {mode} (length {length})")]
    IndexOutOfRange {
        position: usize,
        mode: usize,
        index: usize,
        length: usize,
    },

    #[error("entry {position}: expected {expected} indices, found {found}")]
    DimensionMismatch {
        position: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate index tuple {indices:?}")]
    DuplicateEntry { indices: Vec<usize> },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{0}")]
    Numerical(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },

    #[error("worker {worker} failed: {message}")]
    Worker { worker: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
