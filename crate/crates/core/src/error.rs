//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid layer/scorer configuration (channel mismatch, bad hyper-parameter, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Kernel/stride/padding arithmetic that does not fit the input.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// Out-of-range or inconsistent arguments to an operation.
    #[error("argument error: {0}")]
    Argument(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Layer-graph validation or surgery failures.
    #[error("graph error: {0}")]
    Graph(String),

    /// Dataset specification or generation failures.
    #[error("data error: {0}")]
    Data(String),

    /// Structured-text parse failure, with the offending line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Corrupt or truncated container/checkpoint.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Model fitting failures (degenerate data, no classes, ...).
    #[error("fitting error: {0}")]
    Fitting(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }
    pub(crate) fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub(crate) fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }
}
