use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity was produced while checked mode was on.
    #[error("non-finite value produced by {0}")]
    Numeric(String),

    /// The call violates a precondition of the API.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("size error: {0}")]
    Size(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("model file is corrupt: {0}")]
    Corrupt(String),

    #[error("statistically invalid estimate: {0}")]
    Statistical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
