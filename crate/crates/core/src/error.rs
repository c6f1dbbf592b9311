use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("stale plan: plan fingerprint {plan} does not match model fingerprint {model}")]
    StalePlan { plan: String, model: String },

    #[error("numeric error in block {block}: non-finite activation")]
    Numeric { block: usize },

    #[error("index {index} out of range for width {width}")]
    IndexOutOfRange { index: usize, width: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed input files rather than bad arguments.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Integrity(_) | Error::Truncated(_) | Error::Shape(_) | Error::Json(_)
        )
    }
}
