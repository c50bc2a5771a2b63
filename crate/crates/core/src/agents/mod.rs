//! Chat-completion abstraction shared by every agent-driven stage.
//!
//! An [`Agent`] wraps a [`ChatBackend`] with retry and a shared [`Transcript`].
//! Backends are either remote OpenAI-compatible endpoints or deterministic mocks.

mod mock;
mod openai;
mod template;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use mock::{FnBackend, Scripted, ScriptedMock};
pub(crate) use mock::word_units as mock_units;
pub use openai::{HttpReply, HttpTransport, OpenAiBackend, OpenAiEmbedder, UreqTransport, API_KEY_ENV};
pub use template::{PromptTemplate, TemplateError};

/// Temperature for quiz answering and examination.
pub const DETERMINISTIC_TEMPERATURE: f64 = 0.0;
/// Temperature for rule generation and rewriting.
pub const CREATIVE_TEMPERATURE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_length: u32,
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: impl Into<String>, system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        ChatRequest {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: DETERMINISTIC_TEMPERATURE,
            max_output_length: 1024,
            tag: tag.into(),
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_output_length(mut self, n: u32) -> Self {
        self.max_output_length = n;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub input_units: u64,
    pub output_units: u64,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse { text: text.into(), ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("transient failure{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transient { status: Option<u16>, message: String },
    #[error("request rejected (status {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("content refused by provider: {0}")]
    Refusal(String),
    #[error("transport error after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("unscripted request {0}")]
    Unscripted(String),
    #[error("script exhausted for tag {0}")]
    ScriptExhausted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
}

impl AgentError {
    pub fn is_transient(&self) -> bool {
        matches!(self, AgentError::Transient { .. })
    }
}

pub trait ChatBackend: Send + Sync {
    /// Short identity recorded in run manifests, e.g. `openai:gpt-4o@host`.
    fn identity(&self) -> String;

    /// One attempt, no retry.
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError>;
}

/// Exponential backoff with full jitter: the wait before retry `k` (1-based) is
/// uniform in `[0, base * factor^(k-1)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 5, base_delay_ms: 1000, factor: 2.0 }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        RetryPolicy { base_delay_ms: 0, ..Default::default() }
    }

    pub fn delay_cap(&self, retry: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.factor.powi(retry.saturating_sub(1) as i32);
        Duration::from_millis(ms.round() as u64)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let cap = self.delay_cap(retry);
        if cap.is_zero() {
            return cap;
        }
        Duration::from_millis(rand::thread_rng().gen_range(0..=cap.as_millis() as u64))
    }
}

/// One line of the run transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub tag: String,
    pub backend: String,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub error: Option<String>,
    pub latency: u64,
    pub retries: u32,
    pub input_units: u64,
    pub output_units: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub input_units: u64,
    pub output_units: u64,
}

/// Shared, append-only call log; optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct Transcript {
    entries: Mutex<Vec<TranscriptEntry>>,
    sink: Option<Mutex<BufWriter<File>>>,
    calls: AtomicU64,
    input_units: AtomicU64,
    output_units: AtomicU64,
}

impl std::fmt::Debug for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transcript").field("calls", &self.calls.load(Ordering::Relaxed)).finish()
    }
}

impl Transcript {
    pub fn in_memory() -> Arc<Self> {
        Arc::new(Transcript::default())
    }

    /// Appends to `path`, creating it if needed.
    pub fn to_file(path: &Path) -> std::io::Result<Arc<Self>> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Arc::new(Transcript { sink: Some(Mutex::new(BufWriter::new(file))), ..Default::default() }))
    }

    fn record(&self, entry: TranscriptEntry) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.input_units.fetch_add(entry.input_units, Ordering::SeqCst);
        self.output_units.fetch_add(entry.output_units, Ordering::SeqCst);
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap_or_else(|e| e.into_inner());
            let line = serde_json::to_string(&entry).expect("transcript entries serialize");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log::error!("transcript write failed: {e}");
            }
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn tags(&self) -> Vec<String> {
        self.entries().into_iter().map(|e| e.tag).collect()
    }

    pub fn len(&self) -> usize {
        self.calls.load(Ordering::SeqCst) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn usage(&self) -> UsageTotals {
        UsageTotals {
            calls: self.calls.load(Ordering::SeqCst),
            input_units: self.input_units.load(Ordering::SeqCst),
            output_units: self.output_units.load(Ordering::SeqCst),
        }
    }
}

/// Backend plus retry policy plus transcript; cheap to clone.
#[derive(Clone)]
pub struct Agent {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    transcript: Arc<Transcript>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent").field("backend", &self.backend.identity()).field("retry", &self.retry).finish()
    }
}

impl Agent {
    pub fn new(backend: Arc<dyn ChatBackend>, retry: RetryPolicy, transcript: Arc<Transcript>) -> Self {
        Agent { backend, retry, transcript }
    }

    /// Agent with immediate retries and a private in-memory transcript.
    pub fn for_backend(backend: impl ChatBackend + 'static) -> Self {
        Agent::new(Arc::new(backend), RetryPolicy::immediate(), Transcript::in_memory())
    }

    pub fn identity(&self) -> String {
        self.backend.identity()
    }

    pub fn transcript(&self) -> &Arc<Transcript> {
        &self.transcript
    }

    /// Sends the request, retrying transient failures per the retry policy.
    /// Every call, successful or not, appends exactly one transcript entry.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        if request.user_text.trim().is_empty() {
            return Err(AgentError::InvalidRequest("user_text is empty".into()));
        }
        let started = Instant::now();
        let mut retries = 0u32;
        let outcome = loop {
            match self.backend.send(request) {
                Ok(resp) => break Ok(resp),
                Err(e) if e.is_transient() => {
                    if retries + 1 >= self.retry.max_attempts.max(1) {
                        break Err(AgentError::Exhausted { attempts: retries + 1, last: e.to_string() });
                    }
                    retries += 1;
                    let wait = self.retry.jittered(retries);
                    log::warn!("[{}] transient failure ({e}); retry {retries} in {wait:?}", request.tag);
                    std::thread::sleep(wait);
                }
                Err(e) => break Err(e),
            }
        };
        let latency = started.elapsed().as_millis() as u64;
        let (response, error, input_units, output_units) = match &outcome {
            Ok(r) => (Some(r.text.clone()), None, r.input_units, r.output_units),
            Err(e) => (None, Some(e.to_string()), 0, 0),
        };
        log::debug!(
            "[{}] {} in {latency} ms, retries {retries}, usage {input_units}/{output_units}",
            request.tag,
            if outcome.is_ok() { "ok" } else { "failed" }
        );
        self.transcript.record(TranscriptEntry {
            tag: request.tag.clone(),
            backend: self.backend.identity(),
            request: request.clone(),
            response,
            error,
            latency,
            retries,
            input_units,
            output_units,
        });
        outcome.map(|mut r| {
            r.latency_ms = latency;
            r
        })
    }
}
