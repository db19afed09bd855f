//! Model access: one blocking trait, three interchangeable backends.
//!
//! * [`MockBackend`] — scripted pattern→response rules, for tests and
//!   examples; no network, zero latency, deterministic.
//! * [`HttpBackend`] — any OpenAI-compatible chat-completions endpoint, with
//!   retry and backoff.
//! * [`CachedBackend`] — wraps another backend with an on-disk
//!   request-keyed cache, so reruns and resumed runs never re-pay for a
//!   completion.
//!
//! Everything is synchronous; [`run_batch`] fans requests out over a bounded
//! worker pool when parallelism is wanted.

mod cache;
mod http;
mod mock;

pub use cache::{CacheEntry, CachedBackend, DiskCache};
pub use http::{HttpBackend, RetryPolicy};
pub use mock::{MockBackend, ScriptRule, ScriptedBehavior};

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend error{}: {message} (after {retries} retries)",
        status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Backend {
        /// HTTP status when one was received.
        status: Option<u16>,
        /// Error text or an excerpt of the response body.
        message: String,
        /// Retries performed before giving up.
        retries: u32,
    },
    #[error("request timed out (after {retries} retries)")]
    Timeout { retries: u32 },
    #[error("malformed response: {message}")]
    MalformedResponse { message: String },
    #[error("cache {context}: {source}")]
    Cache {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// One chat completion request. The benchmark only ever needs an optional
/// system message plus a single user message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Sampling seed, forwarded when the endpoint supports it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// A request with only a user message.
    pub fn user_only(model: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system: None,
            user: user.into(),
            temperature: 0.0,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn with_system(mut self, system: impl Into<String>) -> Self {
        self.system = Some(system.into());
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

/// A completed chat turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// The model that produced the text.
    pub model: String,
    pub latency_ms: u64,
    /// True when served from a [`DiskCache`] instead of the wrapped backend.
    pub cached: bool,
}

/// A blocking chat-completion source. Implementations must be shareable
/// across worker threads.
pub trait ModelBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Content-addressed cache key: SHA-256 over the canonical JSON of every
/// request field that can change the completion. Equal requests always hash
/// equal; any field change rekeys.
pub fn cache_key(request: &ChatRequest) -> String {
    // Struct serialization fixes the field order, so the JSON is canonical.
    let canonical = serde_json::to_string(request).expect("request is always serializable");
    let digest = Sha256::digest(canonical.as_bytes());
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        write!(hex, "{byte:02x}").expect("writing to String cannot fail");
    }
    hex
}

/// Runs requests through a bounded worker pool and returns results aligned
/// with the input order (`results[i]` answers `requests[i]`).
///
/// `parallelism == 1` degenerates to a plain sequential loop on the calling
/// thread; `0` is treated as `1`.
pub fn run_batch(
    backend: &dyn ModelBackend,
    requests: &[ChatRequest],
    parallelism: usize,
) -> Vec<Result<ChatResponse, GatewayError>> {
    let workers = parallelism.max(1).min(requests.len().max(1));
    if workers <= 1 {
        return requests.iter().map(|r| backend.complete(r)).collect();
    }

    let mut results: Vec<Option<Result<ChatResponse, GatewayError>>> =
        (0..requests.len()).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<Result<ChatResponse, GatewayError>>>> =
        results.iter_mut().map(std::sync::Mutex::new).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= requests.len() {
                    break;
                }
                let outcome = backend.complete(&requests[index]);
                **slots[index].lock().expect("slot lock poisoned") = Some(outcome);
            });
        }
    });

    results
        .into_iter()
        .map(|slot| slot.expect("every index was claimed exactly once"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(user: &str) -> ChatRequest {
        ChatRequest::user_only("test-model", user)
    }

    #[test]
    fn cache_key_is_stable_and_sensitive() {
        let a = cache_key(&request("hello"));
        let b = cache_key(&request("hello"));
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(a.chars().all(|c| c.is_ascii_hexdigit()));

        assert_ne!(a, cache_key(&request("hello!")));
        assert_ne!(a, cache_key(&request("hello").with_system("sys")));
        assert_ne!(a, cache_key(&request("hello").with_temperature(1.0)));
        let mut seeded = request("hello");
        seeded.seed = Some(7);
        assert_ne!(a, cache_key(&seeded));
        let mut other_model = request("hello");
        other_model.model = "other".into();
        assert_ne!(a, cache_key(&other_model));
    }

    #[test]
    fn batch_results_align_with_requests() {
        let behavior = ScriptedBehavior::new("default")
            .rule("alpha", "A")
            .rule("beta", "B");
        let backend = MockBackend::new("test-model", behavior);
        let requests: Vec<ChatRequest> = (0..40)
            .map(|i| {
                request(match i % 3 {
                    0 => "alpha",
                    1 => "beta",
                    _ => "gamma",
                })
            })
            .collect();
        for parallelism in [1, 4] {
            let results = run_batch(&backend, &requests, parallelism);
            assert_eq!(results.len(), requests.len());
            for (i, result) in results.iter().enumerate() {
                let expected = match i % 3 {
                    0 => "A",
                    1 => "B",
                    _ => "default",
                };
                assert_eq!(result.as_ref().unwrap().text, expected, "index {i}");
            }
        }
    }

    #[test]
    fn batch_of_nothing_is_empty() {
        let backend = MockBackend::new("m", ScriptedBehavior::new("d"));
        assert!(run_batch(&backend, &[], 4).is_empty());
    }
}
