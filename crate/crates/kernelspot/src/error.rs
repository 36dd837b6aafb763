//! Crate-wide error type.

/// Errors produced by any public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor dims do not line up (rank, channel count, spatial size, ...).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument is outside its documented domain (negative margin,
    /// rate outside [0, 1], degenerate polygon, ...).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A file or byte stream does not conform to its format.
    #[error("parse error: {0}")]
    Parse(String),

    /// A weight store lookup failed.
    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
