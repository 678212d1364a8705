//! Chat-completion backends and token/cost accounting.
//!
//! Every backend implements [`ChatBackend`]. Call sites go through
//! [`complete`], which validates the request and retries transient
//! transport failures with exponential backoff.

mod cassette;
mod cost;
mod http;
mod local;
mod mock;

use std::ops::Add;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenCounter;
use crate::types::Role;

pub use cassette::{request_digest, CassetteBackend, CassetteMode};
pub use cost::{
    render_ledger, usage_cost, ClassCosts, CostLedger, CostRow, CostTable, LedgerError, Money,
    PriceTable, Stage, StageEntry,
};
pub use http::{ApiFlavor, HttpBackend, HttpConfig};
pub use local::{estimate_local_cost, LocalComputeSpec, LocalCostEstimate};
pub use mock::{MockBackend, PlaybookEntry, PlaybookFile, PlaybookScript};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend rejected request (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("no playbook script matches conversation `{0}`")]
    NoPlaybook(String),
    #[error("playbook for `{conversation}` exhausted at turn {turn}")]
    PlaybookExhausted { conversation: String, turn: usize },
    #[error("playbook turn {turn} of `{conversation}` expects the prompt to contain `{hint}`")]
    PlaybookMismatch {
        conversation: String,
        turn: usize,
        hint: String,
    },
    #[error("no recorded cassette for request {0}")]
    CassetteMiss(String),
    #[error("backend failure after {attempts} attempts: {last}")]
    BackendFailure { attempts: u32, last: String },
    #[error("run interrupted")]
    Interrupted,
    #[error("io error: {0}")]
    Io(String),
}

impl LlmError {
    pub fn is_transient(&self) -> bool {
        matches!(self, LlmError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    #[serde(default)]
    pub input_tokens: u64,
    #[serde(default)]
    pub output_tokens: u64,
    #[serde(default)]
    pub cache_read_tokens: u64,
    #[serde(default)]
    pub cache_write_tokens: u64,
}

impl TokenUsage {
    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens + self.cache_read_tokens + self.cache_write_tokens
    }

    /// All prompt-side tokens regardless of cache class.
    pub fn prompt_tokens(&self) -> u64 {
        self.input_tokens + self.cache_read_tokens + self.cache_write_tokens
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            input_tokens: self.input_tokens + rhs.input_tokens,
            output_tokens: self.output_tokens + rhs.output_tokens,
            cache_read_tokens: self.cache_read_tokens + rhs.cache_read_tokens,
            cache_write_tokens: self.cache_write_tokens + rhs.cache_write_tokens,
        }
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::default(), Add::add)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Stable key naming the conversation this request belongs to, e.g.
    /// `inst-1/editing/03`. Used for routing scripted responses and cassettes.
    pub conversation: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// `messages[..marker]` is the cacheable prefix.
    pub cache_prefix_marker: Option<usize>,
}

impl ChatRequest {
    pub fn new(conversation: impl Into<String>, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        Self {
            conversation: conversation.into(),
            messages,
            temperature,
            max_output_tokens: 8192,
            cache_prefix_marker: None,
        }
    }

    pub fn with_cache_prefix(mut self, marker: usize) -> Self {
        self.cache_prefix_marker = Some(marker);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must be nonempty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if let Some(marker) = self.cache_prefix_marker {
            if marker > self.messages.len() {
                return Err(LlmError::InvalidRequest(format!(
                    "cache marker {marker} beyond {} messages",
                    self.messages.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of prior assistant replies; the turn index within the conversation.
    pub fn turn_index(&self) -> usize {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count()
    }

    pub fn last_message(&self) -> &str {
        self.messages.last().map(|m| m.content.as_str()).unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub usage: TokenUsage,
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        (**self).send(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay: Duration::ZERO,
            factor: 1.0,
        }
    }

    fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first try
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.base_delay.mul_f64(self.factor.powi(attempt as i32 - 2))
    }
}

/// Sends `request`, retrying transient failures according to `retry`.
pub fn complete(
    request: &ChatRequest,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
) -> Result<Completion, LlmError> {
    request.validate()?;
    let attempts = retry.attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        let delay = retry.delay_before(attempt);
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        match backend.send(request) {
            Ok(done) => return Ok(done),
            Err(err) if err.is_transient() => last = err.to_string(),
            Err(err) => return Err(err),
        }
    }
    Err(LlmError::BackendFailure { attempts, last })
}

/// Four-class usage for a request under the prefix-cache model: tokens
/// before the cache marker are written on a conversation's first request and
/// read on every later one; everything else is plain input.
pub fn account_usage(request: &ChatRequest, response: &str, counter: &dyn TokenCounter) -> TokenUsage {
    let marker = request.cache_prefix_marker.unwrap_or(0).min(request.messages.len());
    let count = |msgs: &[ChatMessage]| -> u64 {
        msgs.iter().map(|m| counter.count(&m.content) as u64).sum()
    };
    let prefix = count(&request.messages[..marker]);
    let rest = count(&request.messages[marker..]);
    let (cache_write_tokens, cache_read_tokens) = if request.turn_index() == 0 {
        (prefix, 0)
    } else {
        (0, prefix)
    };
    TokenUsage {
        input_tokens: rest,
        output_tokens: counter.count(response) as u64,
        cache_read_tokens,
        cache_write_tokens,
    }
}

/// Caps the number of in-flight requests to an inner backend.
pub struct LimitedBackend<B> {
    inner: B,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<B: ChatBackend> LimitedBackend<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<B: ChatBackend> ChatBackend for LimitedBackend<B> {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        {
            let mut n = self.in_flight.lock().unwrap();
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap();
            }
            *n += 1;
        }
        let result = self.inner.send(request);
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::HeuristicCounter;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _request: &ChatRequest) -> Result<Completion, LlmError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(LlmError::Transport("reset".into()))
            } else {
                Ok(Completion {
                    text: "ok".into(),
                    usage: TokenUsage::default(),
                })
            }
        }
    }

    fn req() -> ChatRequest {
        ChatRequest::new("c", vec![ChatMessage::new(Role::User, "hi")], 0.0)
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let b = Flaky {
            failures: 2,
            calls: AtomicU32::new(0),
        };
        let out = complete(&req(), &b, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(out.text, "ok");
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_is_backend_failure() {
        let b = Flaky {
            failures: 10,
            calls: AtomicU32::new(0),
        };
        let err = complete(&req(), &b, &RetryPolicy::immediate(3)).unwrap_err();
        assert!(matches!(err, LlmError::BackendFailure { attempts: 3, .. }));
    }

    #[test]
    fn empty_messages_rejected() {
        let b = Flaky {
            failures: 0,
            calls: AtomicU32::new(0),
        };
        let r = ChatRequest::new("c", vec![], 0.0);
        assert!(matches!(
            complete(&r, &b, &RetryPolicy::default()),
            Err(LlmError::InvalidRequest(_))
        ));
        assert_eq!(b.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn backoff_schedule_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_before(1), Duration::ZERO);
        assert_eq!(p.delay_before(2), Duration::from_secs(1));
        assert_eq!(p.delay_before(3), Duration::from_secs(2));
    }

    #[test]
    fn cache_accounting_first_vs_later_turn() {
        let counter = HeuristicCounter;
        let first = ChatRequest::new(
            "c",
            vec![
                ChatMessage::new(Role::System, "a".repeat(40)),
                ChatMessage::new(Role::User, "b".repeat(80)),
            ],
            0.0,
        )
        .with_cache_prefix(2);
        let u = account_usage(&first, "xxxx", &counter);
        assert_eq!(u.cache_write_tokens, 30);
        assert_eq!(u.cache_read_tokens, 0);
        assert_eq!(u.input_tokens, 0);
        assert_eq!(u.output_tokens, 1);

        let mut later = first.clone();
        later.messages.push(ChatMessage::new(Role::Assistant, "y".repeat(8)));
        later.messages.push(ChatMessage::new(Role::User, "z".repeat(4)));
        let u = account_usage(&later, "", &counter);
        assert_eq!(u.cache_write_tokens, 0);
        assert_eq!(u.cache_read_tokens, 30);
        assert_eq!(u.input_tokens, 3);
    }
}
