use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoreError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("the keep sentinel is not a valid user prompt")]
    KeepSentinelPrompt,
    #[error("decision answer is empty")]
    EmptyDecision,
    #[error("malformed tags: <{0}> opened but never closed")]
    MalformedTags(&'static str),
    #[error("invalid content hash {0:?}")]
    InvalidHash(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Failure reported by a generator, refiner or scorer backend.
#[derive(Debug, Error)]
#[error("{message}")]
pub struct BackendError {
    pub message: String,
    #[source]
    pub source: Option<Box<dyn std::error::Error + Send + Sync>>,
}

impl BackendError {
    pub fn msg(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            source: None,
        }
    }

    pub fn wrap<E>(err: E) -> Self
    where
        E: std::error::Error + Send + Sync + 'static,
    {
        Self {
            message: err.to_string(),
            source: Some(Box::new(err)),
        }
    }
}
