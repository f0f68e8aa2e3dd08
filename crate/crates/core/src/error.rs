use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("undefined exponent: {0}")]
    UndefinedExponent(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("controlled paths refer to different rough paths")]
    ReferenceMismatch,

    #[error("lift is not geometric (symmetric defect {0:.3e})")]
    NonGeometric(f64),

    #[error("fixed point did not converge after {} iterations (last residual {:.3e})", history.len(), history.last().copied().unwrap_or(f64::NAN))]
    NonConvergence { history: Vec<f64> },

    #[error("stopping monitor triggered at t = {0}")]
    MonitorTriggered(f64),

    #[error("missing data: {0}")]
    Missing(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

pub(crate) fn mismatch(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}
