//! HTTP backend behavior against a scripted local server: retry/backoff on
//! 429s, immediate failure on other 4xx, and bearer-token handling including
//! the `INJECTBENCH_API_KEY` environment lookup used by config-built backends.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use injectbench::{
    BackendConfig, ChatRequest, GatewayError, HttpBackend, ModelBackend, RetryPolicy, API_KEY_ENV,
};

const OK_BODY: &str = r#"{"id":"stub","model":"stub-served","choices":[{"index":0,"message":{"role":"assistant","content":"hello from stub"}}]}"#;
const BUSY_BODY: &str = r#"{"error":"slow down"}"#;

/// Minimal one-thread HTTP server that answers each incoming connection with
/// the next scripted status/body pair and records the raw requests it saw.
struct StubServer {
    port: u16,
    requests: Arc<Mutex<Vec<String>>>,
    handle: thread::JoinHandle<()>,
}

impl StubServer {
    fn start(responses: Vec<(u16, &'static str)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let port = listener.local_addr().unwrap().port();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = Arc::clone(&requests);
        let handle = thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                seen.lock().unwrap().push(read_request(&mut stream));
                let reason = match status {
                    200 => "OK",
                    400 => "Bad Request",
                    429 => "Too Many Requests",
                    _ => "Error",
                };
                // `connection: close` forces the client onto a fresh
                // connection per attempt, so attempts == accepted sockets.
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(response.as_bytes()).unwrap();
                stream.flush().unwrap();
            }
        });
        Self {
            port,
            requests,
            handle,
        }
    }

    fn base_url(&self) -> String {
        format!("http://127.0.0.1:{}", self.port)
    }

    /// Waits for the script to finish and returns the captured requests.
    fn finish(self) -> Vec<String> {
        self.handle.join().unwrap();
        Arc::into_inner(self.requests)
            .unwrap()
            .into_inner()
            .unwrap()
    }
}

/// Reads one HTTP/1.1 request (headers plus `Content-Length` body) as text.
fn read_request(stream: &mut TcpStream) -> String {
    let mut raw = Vec::new();
    let mut byte = [0u8; 1];
    while !raw.ends_with(b"\r\n\r\n") {
        if stream.read(&mut byte).unwrap() == 0 {
            break;
        }
        raw.extend_from_slice(&byte);
    }
    let head = String::from_utf8_lossy(&raw).into_owned();
    let body_len = head
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            if name.eq_ignore_ascii_case("content-length") {
                value.trim().parse::<usize>().ok()
            } else {
                None
            }
        })
        .unwrap_or(0);
    let mut body = vec![0u8; body_len];
    stream.read_exact(&mut body).unwrap();
    raw.extend_from_slice(&body);
    String::from_utf8_lossy(&raw).into_owned()
}

/// Short delays so the retry tests finish in milliseconds.
fn fast_policy(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_delay: Duration::from_millis(1),
        factor: 2,
    }
}

#[test]
fn rate_limited_requests_retry_until_success() {
    let server = StubServer::start(vec![(429, BUSY_BODY), (429, BUSY_BODY), (200, OK_BODY)]);
    let backend = HttpBackend::new(
        &server.base_url(),
        "stub-model",
        Some("test-token".into()),
        fast_policy(5),
    )
    .unwrap();

    let response = backend
        .complete(&ChatRequest::user_only("stub-model", "ping"))
        .unwrap();
    assert_eq!(response.text, "hello from stub");
    assert_eq!(response.model, "stub-served");
    assert!(!response.cached);
    assert_eq!(backend.retries_performed(), 2);

    let requests = server.finish();
    assert_eq!(requests.len(), 3, "one socket per attempt");
    for request in &requests {
        let lower = request.to_ascii_lowercase();
        assert!(
            request.starts_with("POST /v1/chat/completions"),
            "{request}"
        );
        assert!(
            lower.contains("authorization: bearer test-token"),
            "missing bearer header in: {request}"
        );
        assert!(request.contains(r#""content":"ping""#), "{request}");
    }
}

#[test]
fn client_errors_fail_immediately_without_auth_header_when_keyless() {
    let server = StubServer::start(vec![(400, BUSY_BODY)]);
    let backend = HttpBackend::new(&server.base_url(), "stub-model", None, fast_policy(5)).unwrap();

    let err = backend
        .complete(&ChatRequest::user_only("stub-model", "ping"))
        .unwrap_err();
    match err {
        GatewayError::Backend {
            status, retries, ..
        } => {
            assert_eq!(status, Some(400));
            assert_eq!(retries, 0);
        }
        other => panic!("expected backend error, got {other:?}"),
    }
    assert_eq!(backend.retries_performed(), 0);

    let requests = server.finish();
    assert_eq!(requests.len(), 1, "a 400 must not be retried");
    assert!(
        !requests[0].to_ascii_lowercase().contains("authorization:"),
        "no key was configured, so no auth header should be sent"
    );
}

#[test]
fn exhausted_retries_report_the_last_status() {
    let server = StubServer::start(vec![(429, BUSY_BODY); 3]);
    let backend = HttpBackend::new(&server.base_url(), "stub-model", None, fast_policy(3)).unwrap();

    let err = backend
        .complete(&ChatRequest::user_only("stub-model", "ping"))
        .unwrap_err();
    match err {
        GatewayError::Backend {
            status, retries, ..
        } => {
            assert_eq!(status, Some(429));
            assert_eq!(retries, 2);
        }
        other => panic!("expected backend error, got {other:?}"),
    }
    assert_eq!(backend.retries_performed(), 2);
    assert_eq!(server.finish().len(), 3);
}

#[test]
fn config_built_backends_read_the_bearer_token_from_the_environment() {
    let server = StubServer::start(vec![(200, OK_BODY)]);
    // Process-global, but this is the only test in the binary touching the
    // variable and nothing else reads it.
    std::env::set_var(API_KEY_ENV, "env-secret-123");
    let backend = BackendConfig::Http {
        model: "stub-model".into(),
        base_url: server.base_url(),
        timeout_ms: Some(5_000),
    }
    .build()
    .unwrap();

    let response = backend
        .complete(&ChatRequest::user_only("stub-model", "ping"))
        .unwrap();
    assert_eq!(response.text, "hello from stub");

    let requests = server.finish();
    assert!(
        requests[0]
            .to_ascii_lowercase()
            .contains("authorization: bearer env-secret-123"),
        "config-built backend must pick the key up from {API_KEY_ENV}: {}",
        requests[0]
    );
}
