use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tracing::{debug, warn};

use crate::config::EndpointConfig;
use crate::error::HttpError;

const MAX_BODY_BYTES: u64 = 256 * 1024 * 1024;
const MAX_BACKOFF: Duration = Duration::from_secs(30);

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Slots {
    free: Mutex<usize>,
    cv: Condvar,
}

struct SlotGuard<'a>(&'a Slots);

impl Slots {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> SlotGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        SlotGuard(self)
    }
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Raw successful response.
#[derive(Debug, Clone)]
pub struct HttpReply {
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl HttpReply {
    pub fn is_json(&self) -> bool {
        self.content_type.as_deref().is_some_and(|c| c.contains("json"))
    }
}

/// Blocking JSON-over-HTTP client with retries and an in-flight bound.
/// Safe to share across threads.
#[derive(Debug)]
pub struct HttpClient {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    slots: Slots,
    attempts: AtomicU64,
}

enum Attempt {
    Done(HttpReply),
    Retry { wait: Option<Duration>, reason: String, rate_limited: bool },
    Fatal(HttpError),
}

impl HttpClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, HttpError> {
        cfg.validate()?;
        let api_key = cfg.api_key()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Slots::new(cfg.max_in_flight);
        Ok(Self { cfg, agent, api_key, slots, attempts: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Total HTTP attempts made by this client, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn post_json<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, HttpError> {
        let reply = self.post(path, body)?;
        serde_json::from_slice(&reply.body).map_err(|e| self.protocol(format!("bad JSON reply: {e}")))
    }

    /// POSTs `body` as JSON, retrying transport failures, 429 and 5xx.
    pub fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<HttpReply, HttpError> {
        let url = self.cfg.url(path);
        let payload = serde_json::to_vec(body).map_err(|e| self.protocol(e.to_string()))?;
        let max_attempts = self.cfg.max_retries + 1;
        let mut last = String::new();
        let mut all_rate_limited = true;
        for attempt in 1..=max_attempts {
            let outcome = {
                let _slot = self.slots.acquire();
                self.attempts.fetch_add(1, Ordering::Relaxed);
                self.attempt(&url, &payload)
            };
            match outcome {
                Attempt::Done(reply) => {
                    debug!(url = %url, attempt, "request succeeded");
                    return Ok(reply);
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { wait, reason, rate_limited } => {
                    warn!(url = %url, attempt, max_attempts, %reason, "request failed");
                    all_rate_limited &= rate_limited;
                    last = reason;
                    if attempt < max_attempts {
                        std::thread::sleep(wait.unwrap_or_else(|| self.backoff(attempt)));
                    }
                }
            }
        }
        if all_rate_limited {
            Err(HttpError::RateLimited { endpoint: self.cfg.base_url.clone(), attempts: max_attempts })
        } else {
            Err(HttpError::Timeout {
                endpoint: self.cfg.base_url.clone(),
                attempts: max_attempts,
                detail: last,
            })
        }
    }

    fn attempt(&self, url: &str, payload: &[u8]) -> Attempt {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send(payload) {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry { wait: None, reason: e.to_string(), rate_limited: false }
            }
        };
        let status = resp.status().as_u16();
        let header = |name: &str| {
            resp.headers().get(name).and_then(|v| v.to_str().ok()).map(str::to_string)
        };
        let content_type = header("content-type");
        let retry_after = header("retry-after").and_then(|v| v.trim().parse::<f64>().ok());
        match status {
            200..=299 => {
                match resp.body_mut().with_config().limit(MAX_BODY_BYTES).read_to_vec() {
                    Ok(body) => Attempt::Done(HttpReply { content_type, body }),
                    Err(e) => Attempt::Retry { wait: None, reason: e.to_string(), rate_limited: false },
                }
            }
            429 => Attempt::Retry {
                wait: retry_after
                    .filter(|s| s.is_finite() && *s >= 0.0)
                    .map(|s| Duration::from_secs_f64(s).min(MAX_BACKOFF)),
                reason: "429 Too Many Requests".into(),
                rate_limited: true,
            },
            500..=599 => {
                Attempt::Retry { wait: None, reason: format!("HTTP {status}"), rate_limited: false }
            }
            _ => {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                Attempt::Fatal(self.protocol(format!("HTTP {status}: {}", text.trim())))
            }
        }
    }

    /// Exponential backoff with jitter in [0.5, 1.0) of the nominal delay.
    fn backoff(&self, attempt: u32) -> Duration {
        let nominal = self.cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
        let jitter: f64 = rand::rng().random_range(0.5..1.0);
        Duration::from_millis((nominal as f64 * jitter) as u64).min(MAX_BACKOFF)
    }

    pub(crate) fn protocol(&self, detail: String) -> HttpError {
        HttpError::Protocol { endpoint: self.cfg.base_url.clone(), detail }
    }
}
