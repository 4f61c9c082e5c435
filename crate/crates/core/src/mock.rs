//! Scripted mock server speaking the chat-completions wire format.
//!
//! A script is a queue of one-shot steps plus reusable match rules and an
//! optional fallback. Rules match on model name and message substrings, so
//! one server can stand in for the simulator, detector, QA, judge, and
//! target endpoints at once. The server also tracks in-flight concurrency
//! for the gateway's bounded-parallelism tests.

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::IntoResponse;
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MockScript {
    /// Consumed strictly in order, one per request, before rules apply.
    #[serde(default)]
    pub steps: Vec<MockReply>,
    /// First matching rule wins once steps are exhausted.
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Option<MockReply>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Match only requests for this model name.
    #[serde(default)]
    pub model: Option<String>,
    /// Match only when the last user message contains this substring.
    #[serde(default)]
    pub last_user_contains: Option<String>,
    /// Match only when any message contains this substring.
    #[serde(default)]
    pub any_message_contains: Option<String>,
    pub reply: MockReply,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockReply {
    #[serde(default = "default_status")]
    pub status: u16,
    #[serde(default)]
    pub content: String,
    #[serde(default = "default_finish")]
    pub finish_reason: String,
    /// Per-token logprob table; omitted tokens mean no logprobs block.
    #[serde(default)]
    pub tokens: Vec<MockToken>,
    /// Artificial handling delay, to widen concurrency windows in tests.
    #[serde(default)]
    pub delay_ms: u64,
}

fn default_status() -> u16 {
    200
}
fn default_finish() -> String {
    "stop".to_string()
}

impl MockReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            status: 200,
            content: content.into(),
            finish_reason: default_finish(),
            tokens: Vec::new(),
            delay_ms: 0,
        }
    }

    pub fn status_only(status: u16) -> Self {
        Self {
            status,
            content: String::new(),
            finish_reason: default_finish(),
            tokens: Vec::new(),
            delay_ms: 0,
        }
    }

    pub fn with_tokens(mut self, tokens: Vec<MockToken>) -> Self {
        self.tokens = tokens;
        self
    }

    pub fn with_delay_ms(mut self, delay_ms: u64) -> Self {
        self.delay_ms = delay_ms;
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockToken {
    pub token: String,
    pub logprob: f64,
    #[serde(default)]
    pub top: Vec<TopEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopEntry {
    pub token: String,
    pub logprob: f64,
}

impl MockRule {
    pub fn for_model(model: &str, reply: MockReply) -> Self {
        Self {
            model: Some(model.to_string()),
            last_user_contains: None,
            any_message_contains: None,
            reply,
        }
    }

    fn matches(&self, body: &Value) -> bool {
        if let Some(model) = &self.model {
            if body.get("model").and_then(Value::as_str) != Some(model.as_str()) {
                return false;
            }
        }
        let messages = body
            .get("messages")
            .and_then(Value::as_array)
            .cloned()
            .unwrap_or_default();
        if let Some(needle) = &self.last_user_contains {
            let last_user = messages
                .iter()
                .rev()
                .find(|m| m.get("role").and_then(Value::as_str) == Some("user"))
                .and_then(|m| m.get("content"))
                .and_then(Value::as_str);
            if !last_user.is_some_and(|c| c.contains(needle.as_str())) {
                return false;
            }
        }
        if let Some(needle) = &self.any_message_contains {
            let hit = messages.iter().any(|m| {
                m.get("content")
                    .and_then(Value::as_str)
                    .is_some_and(|c| c.contains(needle.as_str()))
            });
            if !hit {
                return false;
            }
        }
        true
    }
}

struct ScriptState {
    steps: VecDeque<MockReply>,
    rules: Vec<MockRule>,
    fallback: Option<MockReply>,
}

pub struct MockState {
    script: Mutex<ScriptState>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    requests: AtomicU64,
}

impl MockState {
    fn new(script: MockScript) -> Self {
        Self {
            script: Mutex::new(ScriptState {
                steps: script.steps.into(),
                rules: script.rules,
                fallback: script.fallback,
            }),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            requests: AtomicU64::new(0),
        }
    }

    fn pick(&self, body: &Value) -> Option<MockReply> {
        let mut script = self.script.lock().expect("mock script lock");
        if let Some(step) = script.steps.pop_front() {
            return Some(step);
        }
        if let Some(rule) = script.rules.iter().find(|r| r.matches(body)) {
            return Some(rule.reply.clone());
        }
        script.fallback.clone()
    }
}

/// Handle to a running mock server; aborts the server task on drop.
pub struct MockHandle {
    base_url: String,
    state: Arc<MockState>,
    task: tokio::task::JoinHandle<()>,
}

impl MockHandle {
    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Highest number of simultaneous in-flight requests observed.
    pub fn max_in_flight(&self) -> usize {
        self.state.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn request_count(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockHandle {
    fn drop(&mut self) {
        self.task.abort();
    }
}

fn router(state: Arc<MockState>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .with_state(state)
}

async fn chat_completions(
    State(state): State<Arc<MockState>>,
    Json(body): Json<Value>,
) -> impl IntoResponse {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let current = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(current, Ordering::SeqCst);

    let reply = state.pick(&body);
    let result = match reply {
        None => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": {"message": "mock script has no reply for this request"}})),
        ),
        Some(reply) => {
            if reply.delay_ms > 0 {
                tokio::time::sleep(std::time::Duration::from_millis(reply.delay_ms)).await;
            }
            let status =
                StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            if status.is_success() {
                (status, Json(completion_payload(&body, &reply)))
            } else {
                (
                    status,
                    Json(json!({"error": {"message": format!("scripted status {}", reply.status)}})),
                )
            }
        }
    };

    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    result
}

fn completion_payload(body: &Value, reply: &MockReply) -> Value {
    let model = body
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or("mock-model");
    let logprobs = if reply.tokens.is_empty() {
        Value::Null
    } else {
        json!({
            "content": reply.tokens.iter().map(|t| {
                json!({
                    "token": t.token,
                    "logprob": t.logprob,
                    "top_logprobs": t.top.iter().map(|alt| {
                        json!({"token": alt.token, "logprob": alt.logprob})
                    }).collect::<Vec<_>>(),
                })
            }).collect::<Vec<_>>(),
        })
    };
    json!({
        "id": "mock-completion",
        "object": "chat.completion",
        "model": model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": reply.content},
            "finish_reason": reply.finish_reason,
            "logprobs": logprobs,
        }],
    })
}

/// Serve a script on an ephemeral localhost port.
pub async fn serve(script: MockScript) -> std::io::Result<MockHandle> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    serve_on_listener(listener, script)
}

/// Serve a script on a specific address (used by the standalone binary).
pub async fn serve_at(addr: SocketAddr, script: MockScript) -> std::io::Result<MockHandle> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on_listener(listener, script)
}

fn serve_on_listener(
    listener: tokio::net::TcpListener,
    script: MockScript,
) -> std::io::Result<MockHandle> {
    let addr = listener.local_addr()?;
    let state = Arc::new(MockState::new(script));
    let app = router(state.clone());
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app).await;
    });
    Ok(MockHandle {
        base_url: format!("http://{addr}"),
        state,
        task,
    })
}

/// Load a script from a JSON file.
pub fn load_script(path: &std::path::Path) -> Result<MockScript, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_matching_honors_filters() {
        let rule = MockRule {
            model: Some("sim".into()),
            last_user_contains: Some("career".into()),
            any_message_contains: None,
            reply: MockReply::text("ok"),
        };
        let body = json!({
            "model": "sim",
            "messages": [
                {"role": "system", "content": "be someone"},
                {"role": "user", "content": "give me career advice"}
            ]
        });
        assert!(rule.matches(&body));

        let wrong_model = json!({"model": "qa", "messages": body["messages"]});
        assert!(!rule.matches(&wrong_model));

        let wrong_text = json!({
            "model": "sim",
            "messages": [{"role": "user", "content": "weather?"}]
        });
        assert!(!rule.matches(&wrong_text));
    }

    #[test]
    fn script_files_parse() {
        let script: MockScript = serde_json::from_str(
            r#"{
                "steps": [{"status": 429}, {"status": 200, "content": "hello"}],
                "rules": [{"model": "sim", "reply": {"content": "{\"question\": \"q\", \"end_conversation\": false}"}}],
                "fallback": {"content": "ok"}
            }"#,
        )
        .unwrap();
        assert_eq!(script.steps.len(), 2);
        assert_eq!(script.rules.len(), 1);
        assert!(script.fallback.is_some());
    }
}
