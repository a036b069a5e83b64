use ipr_core::{BackendError, CoreError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("{endpoint}: no response after {attempts} attempts: {detail}")]
    Timeout { endpoint: String, attempts: u32, detail: String },
    #[error("{endpoint}: rate limited on all {attempts} attempts")]
    RateLimited { endpoint: String, attempts: u32 },
    #[error("{endpoint}: protocol error: {detail}")]
    Protocol { endpoint: String, detail: String },
    #[error("{field} = {value} is outside {range}")]
    RangeViolation { field: &'static str, value: f64, range: &'static str },
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("invalid endpoint config: {0}")]
    InvalidConfig(String),
    #[error("refiner reply: {0}")]
    Decision(#[from] CoreError),
    #[error("content store: {0}")]
    Store(String),
}

impl From<HttpError> for BackendError {
    fn from(e: HttpError) -> Self {
        BackendError::wrap(e)
    }
}
