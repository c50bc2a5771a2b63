use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use super::{AgentError, ChatBackend, ChatRequest, ChatResponse};

#[derive(Clone, Debug, PartialEq)]
pub enum Scripted {
    Text(String),
    Fail(AgentError),
}

#[derive(Default)]
struct ScriptState {
    queues: HashMap<String, VecDeque<Scripted>>,
    calls: Vec<ChatRequest>,
}

/// Replays per-tag responses in script order. Each tag owns a queue; a request
/// for a tag with no entries is unscripted, and one past the end of its queue
/// is exhausted. Clones share state, so a test can keep a handle for inspection.
#[derive(Clone, Default)]
pub struct ScriptedMock {
    state: Arc<Mutex<ScriptState>>,
}

impl ScriptedMock {
    pub fn new<'a>(script: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        ScriptedMock::from_entries(
            script.into_iter().map(|(t, r)| (t.to_string(), Scripted::Text(r.to_string()))).collect(),
        )
    }

    pub fn from_entries(entries: Vec<(String, Scripted)>) -> Self {
        let mock = ScriptedMock::default();
        for (tag, s) in entries {
            mock.push(tag, s);
        }
        mock
    }

    pub fn push(&self, tag: impl Into<String>, entry: Scripted) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.queues.entry(tag.into()).or_default().push_back(entry);
    }

    pub fn push_text(&self, tag: impl Into<String>, text: impl Into<String>) {
        self.push(tag, Scripted::Text(text.into()));
    }

    /// Every request received, in arrival order.
    pub fn calls(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).calls.clone()
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).queues.values().map(VecDeque::len).sum()
    }
}

impl ChatBackend for ScriptedMock {
    fn identity(&self) -> String {
        "scripted-mock".into()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        st.calls.push(request.clone());
        let queue = st.queues.get_mut(&request.tag).ok_or_else(|| AgentError::Unscripted(request.tag.clone()))?;
        match queue.pop_front() {
            Some(Scripted::Text(t)) => Ok(ChatResponse {
                input_units: word_units(&request.system_text) + word_units(&request.user_text),
                output_units: word_units(&t),
                text: t,
                latency_ms: 0,
            }),
            Some(Scripted::Fail(e)) => Err(e),
            None => Err(AgentError::ScriptExhausted(request.tag.clone())),
        }
    }
}

pub(crate) fn word_units(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

type Responder = dyn Fn(&ChatRequest) -> Result<String, AgentError> + Send + Sync;

/// Backend computed by a pure function of the request.
#[derive(Clone)]
pub struct FnBackend {
    name: String,
    f: Arc<Responder>,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&ChatRequest) -> Result<String, AgentError> + Send + Sync + 'static,
    ) -> Self {
        FnBackend { name: name.into(), f: Arc::new(f) }
    }
}

impl ChatBackend for FnBackend {
    fn identity(&self) -> String {
        self.name.clone()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, AgentError> {
        let text = (self.f)(request)?;
        Ok(ChatResponse {
            input_units: word_units(&request.system_text) + word_units(&request.user_text),
            output_units: word_units(&text),
            text,
            latency_ms: 0,
        })
    }
}
