use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid weight field: {0}")]
    InvalidField(String),

    #[error("unsupported exponent p = {0}: capacities need p >= {min}", min = crate::radial::MIN_EXPONENT)]
    UnsupportedExponent(f64),

    #[error("insufficient data: need at least {needed} usable points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter validation failed: {0}")]
    Validation(String),

    #[error("no admissible alpha in [2^-40, 2^40]; best margin achieved {max_margin:e}")]
    Calibration { max_margin: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
