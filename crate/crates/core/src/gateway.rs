//! Client for OpenAI-compatible chat-completion endpoints: bounded
//! concurrency, retries with exponential backoff, token log-probability
//! capture, schema-validated structured output, and the two-pass protocol
//! for reasoning models.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;
use tokio::sync::Semaphore;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("rate limited after {attempts} attempt(s)")]
    RateLimited { attempts: u32 },
    #[error("malformed upstream payload: {0}")]
    MalformedUpstreamPayload(String),
    #[error("schema validation exhausted after {attempts} attempt(s); last reply: {last_text}")]
    SchemaValidationExhausted {
        attempts: u32,
        last_text: String,
        /// Pass-1 reasoning, kept when the two-pass protocol fails late.
        reasoning_text: Option<String>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("api key variable '{0}' is not set")]
    MissingApiKey(String),
}

/// Connection settings for one chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token. The key
    /// itself is read at call time and never logged or serialized.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    /// First retry delay; doubles on each subsequent retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_concurrency() -> usize {
    8
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_retry_limit() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            max_concurrency: default_concurrency(),
            timeout_secs: default_timeout_secs(),
            retry_limit: default_retry_limit(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

/// Field kinds an output schema can require.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FieldKind {
    Integer { min: Option<i64>, max: Option<i64> },
    Number,
    Boolean,
    Text { non_empty: bool },
    Choice { options: Vec<String> },
    TextList,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    pub kind: FieldKind,
    pub required: bool,
}

/// A flat object schema for structured output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSchema {
    pub name: String,
    pub fields: Vec<SchemaField>,
}

impl OutputSchema {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, name: &str, kind: FieldKind, required: bool) -> Self {
        self.fields.push(SchemaField {
            name: name.to_string(),
            kind,
            required,
        });
        self
    }

    /// JSON-schema form sent as `response_format` for endpoints that
    /// support constrained decoding.
    pub fn to_json_schema(&self) -> Value {
        let mut properties = serde_json::Map::new();
        let mut required = Vec::new();
        for field in &self.fields {
            let prop = match &field.kind {
                FieldKind::Integer { min, max } => {
                    let mut p = json!({"type": "integer"});
                    if let Some(min) = min {
                        p["minimum"] = json!(min);
                    }
                    if let Some(max) = max {
                        p["maximum"] = json!(max);
                    }
                    p
                }
                FieldKind::Number => json!({"type": "number"}),
                FieldKind::Boolean => json!({"type": "boolean"}),
                FieldKind::Text { non_empty } => {
                    if *non_empty {
                        json!({"type": "string", "minLength": 1})
                    } else {
                        json!({"type": "string"})
                    }
                }
                FieldKind::Choice { options } => json!({"type": "string", "enum": options}),
                FieldKind::TextList => json!({"type": "array", "items": {"type": "string"}}),
            };
            properties.insert(field.name.clone(), prop);
            if field.required {
                required.push(field.name.clone());
            }
        }
        json!({
            "type": "object",
            "properties": properties,
            "required": required,
        })
    }

    /// Check a parsed reply against the schema; the message names the first
    /// violated constraint.
    pub fn validate(&self, value: &Value) -> Result<(), String> {
        let obj = value
            .as_object()
            .ok_or_else(|| "reply is not a JSON object".to_string())?;
        for field in &self.fields {
            let Some(v) = obj.get(&field.name) else {
                if field.required {
                    return Err(format!("missing required field '{}'", field.name));
                }
                continue;
            };
            if v.is_null() && !field.required {
                continue;
            }
            match &field.kind {
                FieldKind::Integer { min, max } => {
                    let n = v
                        .as_i64()
                        .ok_or_else(|| format!("field '{}' must be an integer", field.name))?;
                    if let Some(min) = min {
                        if n < *min {
                            return Err(format!("field '{}' below minimum {min}", field.name));
                        }
                    }
                    if let Some(max) = max {
                        if n > *max {
                            return Err(format!("field '{}' above maximum {max}", field.name));
                        }
                    }
                }
                FieldKind::Number => {
                    if !v.is_number() {
                        return Err(format!("field '{}' must be a number", field.name));
                    }
                }
                FieldKind::Boolean => {
                    if !v.is_boolean() {
                        return Err(format!("field '{}' must be a boolean", field.name));
                    }
                }
                FieldKind::Text { non_empty } => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| format!("field '{}' must be a string", field.name))?;
                    if *non_empty && s.trim().is_empty() {
                        return Err(format!("field '{}' must not be empty", field.name));
                    }
                }
                FieldKind::Choice { options } => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| format!("field '{}' must be a string", field.name))?;
                    if !options.iter().any(|o| o == s) {
                        return Err(format!(
                            "field '{}' must be one of {:?}",
                            field.name, options
                        ));
                    }
                }
                FieldKind::TextList => {
                    let arr = v
                        .as_array()
                        .ok_or_else(|| format!("field '{}' must be an array", field.name))?;
                    if !arr.iter().all(Value::is_string) {
                        return Err(format!(
                            "field '{}' must contain only strings",
                            field.name
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub top_logprobs: u8,
    pub output_schema: Option<OutputSchema>,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(messages: Vec<Message>) -> Self {
        Self {
            messages,
            temperature: 0.0,
            want_logprobs: false,
            top_logprobs: 5,
            output_schema: None,
            seed: None,
        }
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    pub fn with_schema(mut self, schema: OutputSchema) -> Self {
        self.output_schema = Some(schema);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Log probability of one generated token plus its top alternatives.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub position: usize,
    pub token: String,
    pub logprob: f64,
    pub alternatives: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub token_logprobs: Vec<TokenLogprob>,
    pub finish_reason: String,
}

/// Result of a schema-constrained call.
#[derive(Debug, Clone)]
pub struct StructuredOutcome {
    pub value: Value,
    pub response: ChatResponse,
    /// Completions requested before a reply validated.
    pub attempts: u32,
}

/// Result of the two-pass reasoning protocol.
#[derive(Debug, Clone)]
pub struct TwoPassOutcome {
    pub reasoning_text: String,
    pub value: Value,
    pub response: ChatResponse,
    pub attempts: u32,
    pub empty_reasoning: bool,
}

enum SendFailure {
    Network(String),
    Server(u16, String),
    RateLimited,
    Malformed(String),
    Client(u16, String),
}

impl SendFailure {
    fn retryable(&self) -> bool {
        matches!(
            self,
            SendFailure::Network(_) | SendFailure::Server(..) | SendFailure::RateLimited
        )
    }
}

/// A shareable client for one endpoint. Calls are independent; a semaphore
/// keeps in-flight requests at or below `max_concurrency`.
pub struct Gateway {
    cfg: EndpointConfig,
    client: reqwest::Client,
    semaphore: Arc<Semaphore>,
}

impl Gateway {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GatewayError> {
        if cfg.max_concurrency < 1 {
            return Err(GatewayError::InvalidRequest(
                "max_concurrency must be >= 1".into(),
            ));
        }
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        let semaphore = Arc::new(Semaphore::new(cfg.max_concurrency));
        Ok(Self {
            cfg,
            client,
            semaphore,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn bearer_token(&self) -> Result<Option<String>, GatewayError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| GatewayError::MissingApiKey(var.clone())),
        }
    }

    fn wire_body(&self, req: &ChatRequest) -> Value {
        let mut body = json!({
            "model": self.cfg.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
        });
        if req.want_logprobs {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(req.top_logprobs);
        }
        if let Some(schema) = &req.output_schema {
            body["response_format"] = json!({
                "type": "json_schema",
                "json_schema": {
                    "name": schema.name,
                    "strict": true,
                    "schema": schema.to_json_schema(),
                },
            });
        }
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn validate_request(&self, req: &ChatRequest) -> Result<(), GatewayError> {
        if req.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("messages are empty".into()));
        }
        if !(1..=20).contains(&req.top_logprobs) {
            return Err(GatewayError::InvalidRequest(
                "top_logprobs must be in 1..=20".into(),
            ));
        }
        if !(req.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }

    async fn send_once(&self, req: &ChatRequest) -> Result<ChatResponse, SendFailure> {
        let url = format!(
            "{}/v1/chat/completions",
            self.cfg.base_url.trim_end_matches('/')
        );
        let token = match self.bearer_token() {
            Ok(t) => t,
            Err(GatewayError::MissingApiKey(var)) => {
                return Err(SendFailure::Client(0, format!("api key env '{var}' unset")))
            }
            Err(e) => return Err(SendFailure::Client(0, e.to_string())),
        };
        let mut builder = self.client.post(&url).json(&self.wire_body(req));
        if let Some(token) = token {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| SendFailure::Network(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| SendFailure::Network(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(SendFailure::RateLimited);
        }
        if status.is_server_error() {
            return Err(SendFailure::Server(status.as_u16(), body));
        }
        if !status.is_success() {
            return Err(SendFailure::Client(status.as_u16(), body));
        }
        parse_chat_payload(&body, req.top_logprobs).map_err(SendFailure::Malformed)
    }

    /// One chat completion with transport retries (exponential backoff,
    /// doubling from `backoff_base_ms`).
    pub async fn chat_complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.validate_request(req)?;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let permit = self
                .semaphore
                .acquire()
                .await
                .expect("gateway semaphore never closes");
            let outcome = self.send_once(req).await;
            drop(permit);
            let failure = match outcome {
                Ok(resp) => return Ok(resp),
                Err(f) => f,
            };
            let out_of_budget = attempts > self.cfg.retry_limit;
            if !failure.retryable() || out_of_budget {
                return Err(match failure {
                    SendFailure::RateLimited => GatewayError::RateLimited { attempts },
                    SendFailure::Malformed(msg) => GatewayError::MalformedUpstreamPayload(msg),
                    SendFailure::Network(msg) => GatewayError::Transport {
                        attempts,
                        message: msg,
                    },
                    SendFailure::Server(code, msg) | SendFailure::Client(code, msg) => {
                        GatewayError::Transport {
                            attempts,
                            message: format!("status {code}: {msg}"),
                        }
                    }
                });
            }
            let delay = self.cfg.backoff_base_ms.saturating_mul(1 << (attempts - 1));
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
    }

    /// Chat completion whose reply must validate against the request's
    /// output schema; invalid replies are re-asked with the violation
    /// appended, up to `retry_limit` additional times.
    pub async fn complete_structured(
        &self,
        req: &ChatRequest,
    ) -> Result<StructuredOutcome, GatewayError> {
        let schema = req
            .output_schema
            .clone()
            .ok_or_else(|| GatewayError::InvalidRequest("output_schema is required".into()))?;
        let mut working = req.clone();
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            let response = self.chat_complete(&working).await?;
            match parse_structured_text(&schema, &response.text) {
                Ok(value) => {
                    return Ok(StructuredOutcome {
                        value,
                        response,
                        attempts,
                    })
                }
                Err(violation) => {
                    if attempts > self.cfg.retry_limit {
                        return Err(GatewayError::SchemaValidationExhausted {
                            attempts,
                            last_text: response.text,
                            reasoning_text: None,
                        });
                    }
                    working.messages.push(Message::assistant(&response.text));
                    working.messages.push(Message::user(format!(
                        "That reply was rejected: {violation}. Answer again with only a JSON object matching the required schema."
                    )));
                }
            }
        }
    }

    /// Two-pass protocol for reasoning models: pass 1 runs unconstrained to
    /// collect free-form reasoning; pass 2 appends that reasoning as an
    /// assistant turn and re-asks with the schema constraint.
    pub async fn two_pass_reason(
        &self,
        req: &ChatRequest,
    ) -> Result<TwoPassOutcome, GatewayError> {
        if req.output_schema.is_none() {
            return Err(GatewayError::InvalidRequest(
                "output_schema is required".into(),
            ));
        }
        let mut pass1 = req.clone();
        pass1.output_schema = None;
        pass1.want_logprobs = false;
        let reasoning = self.chat_complete(&pass1).await?;
        let reasoning_text = reasoning.text;
        let empty_reasoning = reasoning_text.trim().is_empty();

        let mut pass2 = req.clone();
        pass2.messages.push(Message::assistant(&reasoning_text));
        let structured = match self.complete_structured(&pass2).await {
            Ok(outcome) => outcome,
            Err(GatewayError::SchemaValidationExhausted {
                attempts,
                last_text,
                ..
            }) => {
                return Err(GatewayError::SchemaValidationExhausted {
                    attempts,
                    last_text,
                    reasoning_text: Some(reasoning_text),
                })
            }
            Err(other) => return Err(other),
        };
        Ok(TwoPassOutcome {
            reasoning_text,
            value: structured.value,
            response: structured.response,
            attempts: structured.attempts + 1,
            empty_reasoning,
        })
    }
}

/// Strip a markdown code fence if the reply is wrapped in one.
fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = match rest.find('\n') {
        Some(idx) => &rest[idx + 1..],
        None => rest,
    };
    rest.strip_suffix("```").unwrap_or(rest).trim()
}

fn parse_structured_text(schema: &OutputSchema, text: &str) -> Result<Value, String> {
    let value: Value = serde_json::from_str(strip_fences(text))
        .map_err(|e| format!("reply is not valid JSON ({e})"))?;
    schema.validate(&value)?;
    Ok(value)
}

fn parse_chat_payload(body: &str, top_limit: u8) -> Result<ChatResponse, String> {
    let value: Value =
        serde_json::from_str(body).map_err(|e| format!("payload is not JSON: {e}"))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or("payload has no choices")?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or("choice has no message content")?
        .to_string();
    let finish_reason = choice
        .get("finish_reason")
        .and_then(Value::as_str)
        .unwrap_or("stop")
        .to_string();
    let mut token_logprobs = Vec::new();
    if let Some(entries) = choice.pointer("/logprobs/content").and_then(Value::as_array) {
        for (position, entry) in entries.iter().enumerate() {
            let token = entry
                .get("token")
                .and_then(Value::as_str)
                .ok_or("logprob entry has no token")?
                .to_string();
            let logprob = entry
                .get("logprob")
                .and_then(Value::as_f64)
                .ok_or("logprob entry has no logprob")?;
            let mut alternatives = Vec::new();
            if let Some(top) = entry.get("top_logprobs").and_then(Value::as_array) {
                for alt in top.iter().take(top_limit as usize) {
                    let alt_token = alt
                        .get("token")
                        .and_then(Value::as_str)
                        .ok_or("top_logprobs entry has no token")?
                        .to_string();
                    let alt_lp = alt
                        .get("logprob")
                        .and_then(Value::as_f64)
                        .ok_or("top_logprobs entry has no logprob")?;
                    alternatives.push((alt_token, alt_lp));
                }
            }
            token_logprobs.push(TokenLogprob {
                position,
                token,
                logprob,
                alternatives,
            });
        }
    }
    Ok(ChatResponse {
        text,
        token_logprobs,
        finish_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_schema() -> OutputSchema {
        OutputSchema::new("answer")
            .field(
                "selected_option_id",
                FieldKind::Integer {
                    min: Some(1),
                    max: Some(5),
                },
                true,
            )
            .field("justification", FieldKind::Text { non_empty: true }, true)
    }

    #[test]
    fn schema_validation_catches_range_and_type() {
        let schema = probe_schema();
        let ok = serde_json::json!({"selected_option_id": 2, "justification": "fits"});
        assert!(schema.validate(&ok).is_ok());

        let out_of_range = serde_json::json!({"selected_option_id": 9, "justification": "x"});
        assert!(schema.validate(&out_of_range).is_err());

        let missing = serde_json::json!({"selected_option_id": 2});
        assert!(schema.validate(&missing).is_err());

        let not_object = serde_json::json!([1, 2]);
        assert!(schema.validate(&not_object).is_err());
    }

    #[test]
    fn fenced_json_is_accepted() {
        let schema = probe_schema();
        let text = "```json\n{\"selected_option_id\": 3, \"justification\": \"ok\"}\n```";
        let value = parse_structured_text(&schema, text).unwrap();
        assert_eq!(value["selected_option_id"], 3);
    }

    #[test]
    fn prose_is_rejected() {
        let schema = probe_schema();
        assert!(parse_structured_text(&schema, "I think option two is best.").is_err());
    }

    #[test]
    fn payload_parsing_reads_logprobs() {
        let body = serde_json::json!({
            "choices": [{
                "message": {"role": "assistant", "content": "hi"},
                "finish_reason": "stop",
                "logprobs": {"content": [
                    {"token": "hi", "logprob": -0.1, "top_logprobs": [
                        {"token": "hi", "logprob": -0.1},
                        {"token": "yo", "logprob": -2.5}
                    ]}
                ]}
            }]
        })
        .to_string();
        let resp = parse_chat_payload(&body, 5).unwrap();
        assert_eq!(resp.text, "hi");
        assert_eq!(resp.token_logprobs.len(), 1);
        assert_eq!(resp.token_logprobs[0].alternatives.len(), 2);
    }

    #[test]
    fn payload_alternatives_truncated_to_top_limit() {
        let tops: Vec<_> = (0..8)
            .map(|i| serde_json::json!({"token": format!("t{i}"), "logprob": -1.0 - i as f64}))
            .collect();
        let body = serde_json::json!({
            "choices": [{
                "message": {"content": "x"},
                "finish_reason": "stop",
                "logprobs": {"content": [{"token": "x", "logprob": -0.5, "top_logprobs": tops}]}
            }]
        })
        .to_string();
        let resp = parse_chat_payload(&body, 5).unwrap();
        assert_eq!(resp.token_logprobs[0].alternatives.len(), 5);
    }

    #[test]
    fn malformed_payload_is_an_error() {
        assert!(parse_chat_payload("{}", 5).is_err());
        assert!(parse_chat_payload("not json", 5).is_err());
    }
}
