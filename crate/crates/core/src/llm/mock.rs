//! Scripted backend for tests and desk-scale fixture runs.
//!
//! A playbook maps conversation keys to ordered replies. The reply for a
//! request is chosen by the number of assistant messages already in it, so
//! lookups are stateless: concurrent conversations, retries after a crash,
//! and resumed runs all see the same reply for the same turn.
//!
//! Keys ending in `*` match any conversation with that prefix; the longest
//! matching prefix wins and an exact key always beats a pattern.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{account_usage, ChatBackend, ChatRequest, Completion, LlmError, TokenUsage};
use crate::tokens::{HeuristicCounter, TokenCounter};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookEntry {
    pub response: String,
    /// Declared usage; computed from the request with the cache model when absent.
    #[serde(default)]
    pub usage: Option<TokenUsage>,
    /// Substring the triggering (last) prompt message must contain.
    #[serde(default)]
    pub match_hint: Option<String>,
}

impl PlaybookEntry {
    pub fn reply(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            usage: None,
            match_hint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookScript {
    pub key: String,
    #[serde(rename = "turn", default)]
    pub turns: Vec<PlaybookEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaybookFile {
    #[serde(rename = "script", default)]
    pub scripts: Vec<PlaybookScript>,
}

impl PlaybookFile {
    pub fn from_toml(text: &str) -> Result<Self, LlmError> {
        toml::from_str(text).map_err(|e| LlmError::InvalidRequest(format!("playbook: {e}")))
    }
}

pub struct MockBackend {
    exact: BTreeMap<String, Vec<PlaybookEntry>>,
    patterns: Vec<(String, Vec<PlaybookEntry>)>,
    latency: Duration,
    calls: AtomicU64,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    transcript: Mutex<Vec<(String, usize, String)>>,
}

impl MockBackend {
    pub fn new(files: impl IntoIterator<Item = PlaybookFile>) -> Result<Self, LlmError> {
        let mut exact = BTreeMap::new();
        let mut patterns = Vec::new();
        for file in files {
            for script in file.scripts {
                if let Some(prefix) = script.key.strip_suffix('*') {
                    if patterns.iter().any(|(p, _)| p == prefix) {
                        return Err(LlmError::InvalidRequest(format!(
                            "duplicate playbook key `{}`",
                            script.key
                        )));
                    }
                    patterns.push((prefix.to_string(), script.turns));
                } else if exact.insert(script.key.clone(), script.turns).is_some() {
                    return Err(LlmError::InvalidRequest(format!(
                        "duplicate playbook key `{}`",
                        script.key
                    )));
                }
            }
        }
        // longest prefix first
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            exact,
            patterns,
            latency: Duration::ZERO,
            calls: AtomicU64::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            transcript: Mutex::new(Vec::new()),
        })
    }

    /// Single conversation-agnostic script: every conversation gets `responses`.
    pub fn scripted<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        let script = PlaybookScript {
            key: "*".into(),
            turns: responses.into_iter().map(PlaybookEntry::reply).collect(),
        };
        Self::new([PlaybookFile {
            scripts: vec![script],
        }])
        .expect("single script cannot collide")
    }

    /// Loads every `*.toml` file under `dir`, in path order.
    pub fn load_dir(dir: &Path) -> Result<Self, LlmError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| LlmError::Io(format!("{}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
            .collect();
        paths.sort();
        let mut files = Vec::with_capacity(paths.len());
        for path in paths {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
            files.push(
                PlaybookFile::from_toml(&text)
                    .map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?,
            );
        }
        Self::new(files)
    }

    /// Sleeps this long inside every call; used to exercise concurrency limits.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    /// `(conversation, turn, response)` in call order.
    pub fn transcript(&self) -> Vec<(String, usize, String)> {
        self.transcript.lock().unwrap().clone()
    }

    fn script_for(&self, conversation: &str) -> Option<&[PlaybookEntry]> {
        if let Some(turns) = self.exact.get(conversation) {
            return Some(turns);
        }
        self.patterns
            .iter()
            .find(|(prefix, _)| conversation.starts_with(prefix.as_str()))
            .map(|(_, turns)| turns.as_slice())
    }

    fn respond(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let script = self
            .script_for(&request.conversation)
            .ok_or_else(|| LlmError::NoPlaybook(request.conversation.clone()))?;
        let turn = request.turn_index();
        let entry = script.get(turn).ok_or_else(|| LlmError::PlaybookExhausted {
            conversation: request.conversation.clone(),
            turn,
        })?;
        if let Some(hint) = &entry.match_hint {
            if !request.last_message().contains(hint.as_str()) {
                return Err(LlmError::PlaybookMismatch {
                    conversation: request.conversation.clone(),
                    turn,
                    hint: hint.clone(),
                });
            }
        }
        let usage = entry
            .usage
            .unwrap_or_else(|| account_usage(request, &entry.response, &HeuristicCounter as &dyn TokenCounter));
        self.transcript.lock().unwrap().push((
            request.conversation.clone(),
            turn,
            entry.response.clone(),
        ));
        Ok(Completion {
            text: entry.response.clone(),
            usage,
        })
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let result = self.respond(request);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        result
    }
}
