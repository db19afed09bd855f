//! Scripted backend for tests and examples.
//!
//! Behavior is an ordered rule list: the first rule whose patterns all occur
//! in the incoming prompt wins, otherwise a default response is returned.
//! Responses may reference the request through `{user}` and `{system}`
//! placeholders, which makes echo models and rewriting models one-liners.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{ChatRequest, ChatResponse, GatewayError, ModelBackend};

/// One pattern→response rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring that must occur in the prompt (system and user message
    /// joined with a newline).
    pub pattern: String,
    /// Additional substrings that must all occur too.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub also: Vec<String>,
    /// Response template; `{user}` and `{system}` expand to the request
    /// messages.
    pub response: String,
}

/// An ordered rule list with a fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedBehavior {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    /// Returned when no rule matches; also a template.
    pub default_response: String,
}

impl ScriptedBehavior {
    pub fn new(default_response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default_response: default_response.into(),
        }
    }

    /// Appends a single-pattern rule.
    pub fn rule(mut self, pattern: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(ScriptRule {
            pattern: pattern.into(),
            also: Vec::new(),
            response: response.into(),
        });
        self
    }

    /// Appends a rule that requires every listed pattern at once.
    pub fn rule_with(
        mut self,
        pattern: impl Into<String>,
        also: &[&str],
        response: impl Into<String>,
    ) -> Self {
        self.rules.push(ScriptRule {
            pattern: pattern.into(),
            also: also.iter().map(|s| s.to_string()).collect(),
            response: response.into(),
        });
        self
    }

    /// Picks the response template for a prompt.
    fn select(&self, haystack: &str) -> &str {
        self.rules
            .iter()
            .find(|rule| {
                haystack.contains(&rule.pattern)
                    && rule.also.iter().all(|p| haystack.contains(p.as_str()))
            })
            .map(|rule| rule.response.as_str())
            .unwrap_or(&self.default_response)
    }
}

/// In-process deterministic backend driven by a [`ScriptedBehavior`].
pub struct MockBackend {
    model_id: String,
    behavior: ScriptedBehavior,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(model_id: impl Into<String>, behavior: ScriptedBehavior) -> Self {
        Self {
            model_id: model_id.into(),
            behavior,
            calls: AtomicU64::new(0),
        }
    }

    /// Total completions served.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ModelBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let haystack = match &request.system {
            Some(system) => format!("{system}\n{}", request.user),
            None => request.user.clone(),
        };
        let template = self.behavior.select(&haystack);
        let text = render_response(
            template,
            request.system.as_deref().unwrap_or(""),
            &request.user,
        );
        Ok(ChatResponse {
            text,
            model: self.model_id.clone(),
            latency_ms: 0,
            cached: false,
        })
    }
}

/// Single-pass placeholder expansion; substituted text is never rescanned,
/// so a prompt that itself contains `{user}` cannot loop or double-expand.
fn render_response(template: &str, system: &str, user: &str) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        if let Some(stripped) = tail.strip_prefix("{user}") {
            out.push_str(user);
            rest = stripped;
        } else if let Some(stripped) = tail.strip_prefix("{system}") {
            out.push_str(system);
            rest = stripped;
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(user: &str) -> ChatRequest {
        ChatRequest::user_only("mock", user)
    }

    #[test]
    fn first_matching_rule_wins() {
        let backend = MockBackend::new(
            "mock",
            ScriptedBehavior::new("fallback")
                .rule("cash", "spam")
                .rule("cash prize", "never reached"),
        );
        assert_eq!(
            backend.complete(&req("win cash prize")).unwrap().text,
            "spam"
        );
        assert_eq!(backend.complete(&req("hello")).unwrap().text, "fallback");
    }

    #[test]
    fn conjunctive_rule_requires_all_patterns() {
        let backend = MockBackend::new(
            "mock",
            ScriptedBehavior::new("miss").rule_with("alpha", &["beta", "gamma"], "hit"),
        );
        assert_eq!(
            backend.complete(&req("alpha beta gamma")).unwrap().text,
            "hit"
        );
        assert_eq!(backend.complete(&req("alpha beta")).unwrap().text, "miss");
    }

    #[test]
    fn rules_see_system_and_user_together() {
        let backend = MockBackend::new(
            "mock",
            ScriptedBehavior::new("miss").rule_with("classify", &["payload"], "hit"),
        );
        let request = req("the payload").with_system("You classify text.");
        assert_eq!(backend.complete(&request).unwrap().text, "hit");
    }

    #[test]
    fn templates_echo_request_parts() {
        let backend = MockBackend::new(
            "mock",
            ScriptedBehavior::new("sys=[{system}] user=[{user}]"),
        );
        let response = backend.complete(&req("DATA").with_system("SYS")).unwrap();
        assert_eq!(response.text, "sys=[SYS] user=[DATA]");
        // Placeholders inside the substituted user text stay literal.
        let echoed = backend.complete(&req("{system} trick")).unwrap();
        assert_eq!(echoed.text, "sys=[] user=[{system} trick]");
    }

    #[test]
    fn call_counter_tracks_completions() {
        let backend = MockBackend::new("mock", ScriptedBehavior::new("ok"));
        assert_eq!(backend.calls(), 0);
        backend.complete(&req("a")).unwrap();
        backend.complete(&req("b")).unwrap();
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn behavior_round_trips_through_json() {
        let behavior = ScriptedBehavior::new("d").rule_with("p", &["q"], "r");
        let json = serde_json::to_string(&behavior).unwrap();
        let back: ScriptedBehavior = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rules.len(), 1);
        assert_eq!(back.rules[0].also, ["q"]);
        assert_eq!(back.default_response, "d");
    }
}
