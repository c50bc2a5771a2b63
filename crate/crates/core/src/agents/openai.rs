//! OpenAI-compatible chat-completions and embeddings over a pluggable HTTP transport.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{AgentError, ChatBackend, ChatRequest, ChatResponse};
use crate::confusable::{EmbedError, EmbeddingBackend};

/// Environment variable holding the bearer credential.
pub const API_KEY_ENV: &str = "RLJP_API_KEY";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal POST-JSON transport. `Err` means the request never produced an
/// HTTP status (connect failure, timeout) and is always treated as transient.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        UreqTransport { agent: config.into() }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

fn endpoint(base_url: &str, path: &str) -> String {
    let base = base_url.trim_end_matches('/');
    let base = base.strip_suffix("/v1").unwrap_or(base);
    format!("{base}/v1/{path}")
}

fn classify_status(reply: &HttpReply) -> Result<(), AgentError> {
    match reply.status {
        200..=299 => Ok(()),
        408 | 409 | 429 | 500..=599 => {
            Err(AgentError::Transient { status: Some(reply.status), message: snippet(&reply.body) })
        }
        s => Err(AgentError::Rejected { status: s, message: snippet(&reply.body) }),
    }
}

fn snippet(body: &str) -> String {
    body.chars().take(300).collect()
}

pub struct OpenAiBackend {
    base_url: String,
    model: String,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
}

impl OpenAiBackend {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        OpenAiBackend { base_url: base_url.into(), model: model.into(), api_key, transport }
    }

    /// Reads the credential from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        OpenAiBackend::new(base_url, model, key, Arc::new(UreqTransport::new(timeout)))
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(json!({"role": "system", "content": request.system_text}));
        }
        messages.push(json!({"role": "user", "content": request.user_text}));
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_length,
        })
    }
}

/// Extracts text and usage from a chat-completions response body.
pub(crate) fn parse_chat_body(body: &str) -> Result<ChatResponse, AgentError> {
    let v: Value = serde_json::from_str(body).map_err(|e| AgentError::Malformed(e.to_string()))?;
    let choice = v["choices"].get(0).ok_or_else(|| AgentError::Malformed("no choices".into()))?;
    let message = &choice["message"];
    if let Some(refusal) = message["refusal"].as_str().filter(|r| !r.is_empty()) {
        return Err(AgentError::Refusal(refusal.to_string()));
    }
    if choice["finish_reason"].as_str() == Some("content_filter") {
        return Err(AgentError::Refusal("content_filter".into()));
    }
    let text = message["content"]
        .as_str()
        .ok_or_else(|| AgentError::Malformed("choice has no text content".into()))?
        .to_string();
    Ok(ChatResponse {
        text,
        input_units: v["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        output_units: v["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        latency_ms: 0,
    })
}

impl ChatBackend for OpenAiBackend {
    fn identity(&self) -> String {
        format!("openai:{}@{}", self.model, self.base_url)
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        let url = endpoint(&self.base_url, "chat/completions");
        let reply = self
            .transport
            .post_json(&url, self.api_key.as_deref(), &self.request_body(request))
            .map_err(|message| AgentError::Transient { status: None, message })?;
        classify_status(&reply)?;
        parse_chat_body(&reply.body)
    }
}

/// Remote embedding endpoint (`/v1/embeddings`).
pub struct OpenAiEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    transport: Arc<dyn HttpTransport>,
    max_attempts: u32,
}

impl OpenAiEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        OpenAiEmbedder { base_url: base_url.into(), model: model.into(), api_key, transport, max_attempts: 5 }
    }

    pub fn from_env(base_url: impl Into<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        OpenAiEmbedder::new(base_url, model, key, Arc::new(UreqTransport::new(timeout)))
    }

    fn embed_once(&self, text: &str) -> Result<Vec<f64>, AgentError> {
        let url = endpoint(&self.base_url, "embeddings");
        let body = json!({"model": self.model, "input": text});
        let reply = self
            .transport
            .post_json(&url, self.api_key.as_deref(), &body)
            .map_err(|message| AgentError::Transient { status: None, message })?;
        classify_status(&reply)?;
        let v: Value = serde_json::from_str(&reply.body).map_err(|e| AgentError::Malformed(e.to_string()))?;
        v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| AgentError::Malformed("no embedding in response".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| AgentError::Malformed("non-numeric embedding".into())))
            .collect()
    }
}

impl EmbeddingBackend for OpenAiEmbedder {
    fn identity(&self) -> String {
        format!("openai-embeddings:{}@{}", self.model, self.base_url)
    }

    fn embed(&self, case_id: &str, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut last = String::new();
        for attempt in 0..self.max_attempts {
            match self.embed_once(text) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() => {
                    last = e.to_string();
                    std::thread::sleep(Duration::from_millis(100 * (1 << attempt)));
                }
                Err(e) => return Err(EmbedError::Provider { case_id: case_id.into(), message: e.to_string() }),
            }
        }
        Err(EmbedError::Provider { case_id: case_id.into(), message: last })
    }
}
