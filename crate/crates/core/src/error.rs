//! Error type shared across the crate.

use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors/operands.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid run configuration (bad key, bad value, missing preset).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or file content failed validation.
    #[error("validation error in {path}: {reason}")]
    Validation { path: PathBuf, reason: String },

    /// Numeric failure (NaN/Inf where finiteness is guaranteed).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk format (JSON, PNG, checkpoint header).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn validation(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Validation { path: path.into(), reason: reason.into() }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Format(format!("image: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
