//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by score ingestion, construction and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition (empty set, out-of-range
    /// score, negative weight, ...). These map to CLI exit code 2.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A file could not be parsed; carries the offending location.
    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Internal inconsistency that indicates a bug rather than bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
