use thiserror::Error;

/// Error type shared across the toolkit.
#[derive(Error, Debug)]
pub enum ZiqeError {
    /// A numeric argument violated its domain (non-finite, wrong sign, out of range).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tensor or sequence shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is missing, unknown, or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed.
    #[error("format error: {0}")]
    Format(String),

    /// Numerical optimization failed to converge or diverged.
    #[error("optimization error: {0}")]
    Optimization(String),

    /// A non-finite value appeared where finite numbers are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ZiqeError>;

impl ZiqeError {
    pub fn domain(msg: impl Into<String>) -> Self {
        ZiqeError::Domain(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        ZiqeError::Shape(msg.into())
    }
}
