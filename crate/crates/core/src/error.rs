use std::io;

use thiserror::Error;

/// Errors raised anywhere in the DVAN pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Bad user-supplied input (empty image, out-of-range label, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// Canvas plan does not fit the image.
    #[error("invalid canvas plan: {0}")]
    Plan(String),
    /// Invalid synthetic task description.
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    /// Malformed file contents.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
