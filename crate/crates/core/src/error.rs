//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input (lengths, ranges, missing data).
    #[error("invalid input: {0}")]
    Input(String),
    /// A value left the mathematical domain of an operation
    /// (non-positive price, zero ES in a ratio, log barrier breach).
    #[error("domain error: {0}")]
    Domain(String),
    /// A filter recursion produced non-finite state.
    #[error("filter diverged: {0}")]
    Divergence(String),
    /// An estimation routine could not produce a usable model.
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
