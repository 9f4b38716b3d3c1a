//! Retry loop shared by the remote chat and embedding backends.

use std::sync::Arc;
use std::time::Duration;

use reqwest::blocking::{RequestBuilder, Response};
use reqwest::header::RETRY_AFTER;
use reqwest::StatusCode;
use tracing::warn;

use crate::error::{Error, Result};

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Clone)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Upper bound applied to server `Retry-After` hints.
    pub max_retry_after: Duration,
    pub sleeper: Sleeper,
}

impl std::fmt::Debug for RetryPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetryPolicy")
            .field("max_retries", &self.max_retries)
            .field("base_delay", &self.base_delay)
            .field("max_delay", &self.max_delay)
            .finish()
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base_delay: Duration) -> Self {
        RetryPolicy {
            max_retries,
            base_delay,
            max_delay: Duration::from_secs(30),
            max_retry_after: Duration::from_secs(60),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Chat completions: 3 retries, 500 ms doubling.
    pub fn chat_default() -> Self {
        Self::new(3, Duration::from_millis(500))
    }

    /// Embeddings: 3 attempts in total, 500 ms doubling.
    pub fn embedding_default() -> Self {
        Self::new(2, Duration::from_millis(500))
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Sends the request built by `build`, retrying timeouts, connection
    /// failures, 429 and 5xx. Other statuses are returned to the caller.
    pub fn send(&self, build: impl Fn() -> RequestBuilder) -> Result<Response> {
        let mut retry = 0;
        loop {
            let (status, message, hint) = match build().send() {
                Ok(resp) => {
                    let status = resp.status();
                    if !is_transient(status) {
                        return Ok(resp);
                    }
                    let hint = retry_after(&resp);
                    let body = resp.text().unwrap_or_default();
                    (Some(status.as_u16()), format!("HTTP {status}: {body}"), hint)
                }
                Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                    (e.status().map(|s| s.as_u16()), e.to_string(), None)
                }
                Err(e) => {
                    return Err(Error::BackendUnavailable {
                        status: e.status().map(|s| s.as_u16()),
                        message: e.to_string(),
                    })
                }
            };
            if retry >= self.max_retries {
                return Err(Error::BackendUnavailable { status, message });
            }
            let delay = hint.map(|h| h.min(self.max_retry_after)).unwrap_or_else(|| self.backoff(retry));
            warn!(retry = retry + 1, ?delay, %message, "transient backend failure, retrying");
            (self.sleeper)(delay);
            retry += 1;
        }
    }
}

fn is_transient(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

fn retry_after(resp: &Response) -> Option<Duration> {
    let raw = resp.headers().get(RETRY_AFTER)?.to_str().ok()?;
    raw.trim().parse::<f64>().ok().filter(|s| s.is_finite() && *s >= 0.0).map(Duration::from_secs_f64)
}
