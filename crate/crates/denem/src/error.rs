//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition or invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// Array shapes disagree where they must match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration file or value is unusable.
    #[error("config: {0}")]
    Config(String),

    /// A dataset on disk is missing pieces or self-inconsistent.
    #[error("dataset: {0}")]
    Dataset(String),

    /// A checkpoint directory is missing pieces or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
