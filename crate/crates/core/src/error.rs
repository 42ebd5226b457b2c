use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// A serialized file is malformed or has the wrong version.
    #[error("format error: {0}")]
    Format(String),
    /// A computation produced NaN/Inf where finite values are required.
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
