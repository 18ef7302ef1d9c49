//! Chat-completion access behind a small backend trait.
//!
//! [`Gateway`] adds request validation, bounded retries with exponential
//! backoff, and a per-backend in-flight limit on top of any [`ChatBackend`].
//! Backends: [`HttpBackend`] (chat-completions wire format), the scripted
//! and lexicon mocks, and cassette record/replay.

mod cassette;
mod http;
mod mock;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cassette::{Cassette, CassetteEntry, RecordingBackend, ReplayBackend, RequestSummary};
pub use http::{HttpBackend, HttpConfig};
pub use mock::{FnBackend, LexiconMock, SequenceBackend};

pub const DEFAULT_TRIAGE_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_KEYWORD_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be a system or user message".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable hex digest over model, messages and every sampling parameter.
    pub fn key(&self) -> String {
        // Field order of this struct is the canonical form.
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

impl FinishReason {
    /// Maps wire values; anything unrecognized becomes `Error`.
    pub fn from_wire(value: Option<&str>) -> Self {
        match value {
            Some("stop") | Some("eos") | Some("end_turn") | None => FinishReason::Stop,
            Some("length") | Some("max_tokens") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn stop(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        }
    }
}

/// What a backend reports. Only `Transient` is retried.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no cassette entry for request key {key}")]
    CassetteMiss { key: String },
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("replay miss: no recorded response for request key {key}")]
    CassetteMiss { key: String },
    #[error("backend error: {0}")]
    Backend(String),
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub initial_delay: Duration,
    pub multiplier: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_delay: Duration::from_millis(500),
            multiplier: 2.0,
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        self.initial_delay.mul_f64(factor).min(self.max_delay)
    }
}

/// Counting semaphore for in-flight requests.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct GatewayStats {
    pub requests: u64,
    pub attempts: u64,
    pub retries: u64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: Limiter,
    sleeper: Sleeper,
    requests: AtomicU64,
    attempts: AtomicU64,
    retries: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("retry", &self.retry)
            .field("max_in_flight", &self.limiter.max)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_MAX_IN_FLIGHT),
            sleeper: Arc::new(std::thread::sleep),
            requests: AtomicU64::new(0),
            attempts: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.limiter = Limiter::new(max);
        self
    }

    /// Replaces the backoff sleep, e.g. to record delays in tests.
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.max
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            attempts: self.attempts.load(Ordering::Relaxed),
            retries: self.retries.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.attempts.fetch_add(1, Ordering::Relaxed);
            let started = Instant::now();
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(request)
            };
            match result {
                Ok(mut response) => {
                    if response.finish_reason == FinishReason::Stop && response.content.is_empty() {
                        return Err(GatewayError::Protocol(
                            "finish_reason=stop with empty content".into(),
                        ));
                    }
                    if response.latency_ms == 0 {
                        response.latency_ms = started.elapsed().as_millis() as u64;
                    }
                    tracing::debug!(
                        backend = self.backend.name(),
                        attempt,
                        latency_ms = response.latency_ms,
                        "completion received"
                    );
                    return Ok(response);
                }
                Err(BackendError::Transient(message)) => {
                    if attempt >= max_attempts {
                        tracing::warn!(
                            backend = self.backend.name(),
                            attempt,
                            error = %message,
                            "giving up after final attempt"
                        );
                        return Err(GatewayError::Exhausted {
                            attempts: attempt,
                            last: message,
                        });
                    }
                    let delay = self.retry.delay_after(attempt);
                    tracing::warn!(
                        backend = self.backend.name(),
                        attempt,
                        delay_ms = delay.as_millis() as u64,
                        error = %message,
                        "transient failure, retrying"
                    );
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    (self.sleeper)(delay);
                }
                Err(BackendError::Protocol(message)) => return Err(GatewayError::Protocol(message)),
                Err(BackendError::CassetteMiss { key }) => return Err(GatewayError::CassetteMiss { key }),
                Err(BackendError::Fatal(message)) => return Err(GatewayError::Backend(message)),
            }
        }
    }
}
