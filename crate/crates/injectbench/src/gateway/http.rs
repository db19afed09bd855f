//! HTTP backend for OpenAI-compatible chat-completions endpoints.
//!
//! Sends `POST {base_url}/v1/chat/completions` with an optional bearer token
//! (callers usually take it from the `INJECTBENCH_API_KEY` environment
//! variable). Transport failures, HTTP 429 and 5xx responses are retried
//! with exponential backoff; other 4xx responses fail immediately because
//! resending the same bad request cannot help.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, GatewayError, ModelBackend};

/// Retry schedule: `max_attempts` tries total, sleeping
/// `base_delay * factor^i` after the i-th failure.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            factor: 2,
        }
    }
}

impl RetryPolicy {
    /// Sleep before retry number `retry` (1-based).
    fn delay_before_retry(&self, retry: u32) -> Duration {
        self.base_delay * self.factor.saturating_pow(retry - 1)
    }
}

/// Blocking client for one model behind one endpoint.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    retries_performed: AtomicU64,
}

impl HttpBackend {
    /// `base_url` is the server root, e.g. `http://localhost:8000`; the
    /// chat-completions path is appended here.
    pub fn new(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        policy: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        Self::with_timeout(base_url, model, api_key, policy, Duration::from_secs(120))
    }

    pub fn with_timeout(
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        policy: RetryPolicy,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|err| GatewayError::Backend {
                status: None,
                message: format!("building HTTP client: {err}"),
                retries: 0,
            })?;
        Ok(Self {
            client,
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key,
            policy,
            retries_performed: AtomicU64::new(0),
        })
    }

    /// Total retries performed across all requests.
    pub fn retries_performed(&self) -> u64 {
        self.retries_performed.load(Ordering::Relaxed)
    }

    fn attempt_once(&self, body: &WireRequest) -> AttemptOutcome {
        let mut builder = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(response) => response,
            Err(err) if err.is_timeout() => return AttemptOutcome::RetryTimeout,
            Err(err) => return AttemptOutcome::RetryTransport(err.to_string()),
        };
        let status = response.status();
        let text = response.text().unwrap_or_default();
        if status.as_u16() == 429 || status.is_server_error() {
            return AttemptOutcome::RetryStatus(status.as_u16(), excerpt(&text));
        }
        if !status.is_success() {
            return AttemptOutcome::FailStatus(status.as_u16(), excerpt(&text));
        }
        AttemptOutcome::Success(text)
    }
}

enum AttemptOutcome {
    Success(String),
    RetryTimeout,
    RetryTransport(String),
    RetryStatus(u16, String),
    FailStatus(u16, String),
}

impl ModelBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let body = WireRequest::from_request(&self.model, request);
        let started = Instant::now();
        let mut retries: u32 = 0;
        loop {
            let outcome = self.attempt_once(&body);
            let (status, message, timed_out) = match outcome {
                AttemptOutcome::Success(text) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    return parse_completion(&text, &self.model, latency_ms);
                }
                AttemptOutcome::FailStatus(status, message) => {
                    return Err(GatewayError::Backend {
                        status: Some(status),
                        message,
                        retries,
                    });
                }
                AttemptOutcome::RetryTimeout => (None, String::new(), true),
                AttemptOutcome::RetryTransport(message) => (None, message, false),
                AttemptOutcome::RetryStatus(status, message) => (Some(status), message, false),
            };
            retries += 1;
            if retries >= self.policy.max_attempts {
                return Err(if timed_out {
                    GatewayError::Timeout {
                        retries: retries - 1,
                    }
                } else {
                    GatewayError::Backend {
                        status,
                        message,
                        retries: retries - 1,
                    }
                });
            }
            self.retries_performed.fetch_add(1, Ordering::Relaxed);
            std::thread::sleep(self.policy.delay_before_retry(retries));
        }
    }
}

fn excerpt(body: &str) -> String {
    const LIMIT: usize = 200;
    let trimmed = body.trim();
    if trimmed.len() <= LIMIT {
        return trimmed.to_string();
    }
    let mut end = LIMIT;
    while !trimmed.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &trimmed[..end])
}

fn parse_completion(
    text: &str,
    model: &str,
    latency_ms: u64,
) -> Result<ChatResponse, GatewayError> {
    let wire: WireResponse =
        serde_json::from_str(text).map_err(|err| GatewayError::MalformedResponse {
            message: format!("{err}; body: {}", excerpt(text)),
        })?;
    let choice =
        wire.choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse {
                message: "response carried no choices".into(),
            })?;
    Ok(ChatResponse {
        text: choice.message.content,
        model: wire.model.unwrap_or_else(|| model.to_string()),
        latency_ms,
        cached: false,
    })
}

// ─── Wire format ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
struct WireRequest {
    model: String,
    messages: Vec<WireMessage>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireMessage {
    role: String,
    content: String,
}

impl WireRequest {
    fn from_request(model: &str, request: &ChatRequest) -> Self {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &request.system {
            messages.push(WireMessage {
                role: "system".into(),
                content: system.clone(),
            });
        }
        messages.push(WireMessage {
            role: "user".into(),
            content: request.user.clone(),
        });
        Self {
            model: model.to_string(),
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    #[serde(default)]
    model: Option<String>,
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    message: WireMessage,
}
