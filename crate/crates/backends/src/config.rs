use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::HttpError;

/// Wire protocol spoken by an endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// The minimal JSON protocol described in `PROTOCOL.md`.
    #[default]
    Native,
    /// OpenAI-compatible `/images/generations` and `/chat/completions`.
    Openai,
}

/// One remote model endpoint. The API key is never stored here: only the name
/// of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Initial backoff; doubles on each retry, with jitter.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default)]
    pub protocol: Protocol,
}

fn default_timeout_secs() -> f64 {
    60.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_max_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    250
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env: None,
            model_name: model_name.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            backoff_ms: default_backoff_ms(),
            protocol: Protocol::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HttpError> {
        let bad = |m: String| Err(HttpError::InvalidConfig(m));
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return bad(format!("base_url must be http(s), got {:?}", self.base_url));
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name must not be empty".into());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad("timeout_secs must be > 0".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1".into());
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    /// Reads the API key from the configured environment variable.
    pub fn api_key(&self) -> Result<Option<String>, HttpError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| HttpError::MissingApiKey(var.clone())),
        }
    }

    pub(crate) fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }
}
