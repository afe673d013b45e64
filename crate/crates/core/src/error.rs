use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible extents, ranks or axes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates its contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty batch: every label entry is masked")]
    EmptyBatch,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("parse error in {}:{row}: {msg}", file.display())]
    Parse { file: PathBuf, row: usize, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(file: impl Into<PathBuf>, row: usize, msg: impl Into<String>) -> Self {
        Error::Parse { file: file.into(), row, msg: msg.into() }
    }
}
