use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, sizes or configuration values that the operation cannot accept.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// NaN/Inf encountered, or training diverged.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed dataset or checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::InvalidInput(format!($($arg)*)) };
}
pub(crate) use invalid;
