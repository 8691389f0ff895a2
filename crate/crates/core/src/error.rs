//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument, configuration value, or contract violation.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Tensor or dataset dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced or encountered a non-finite value, or a linear
    /// system could not be solved.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Delimited-file parse failure, reported with a 1-based line number.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Checkpoint file is malformed or from an unsupported format version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
