//! Backend construction and a request limit shared by every backend of a run.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use anyhow::{Context as _, Result};
use monkeys_core::llm::{CassetteBackend, ChatBackend, ChatRequest, Completion, HttpBackend, LlmError, MockBackend};

use crate::config::BackendConfig;

/// Counting semaphore over in-flight requests.
#[derive(Debug)]
pub struct RequestLimit {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl RequestLimit {
    pub fn new(limit: usize) -> Arc<Self> {
        Arc::new(Self {
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    fn acquire(&self) {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.limit {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        *self.in_flight.lock().unwrap() -= 1;
        self.freed.notify_one();
    }
}

/// A backend whose requests count against a shared [`RequestLimit`].
pub struct Limited {
    inner: Arc<dyn ChatBackend>,
    limit: Arc<RequestLimit>,
}

impl Limited {
    pub fn new(inner: Arc<dyn ChatBackend>, limit: Arc<RequestLimit>) -> Self {
        Self { inner, limit }
    }
}

impl ChatBackend for Limited {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        self.limit.acquire();
        let result = self.inner.send(request);
        self.limit.release();
        result
    }
}

pub fn build_backend(config: &BackendConfig) -> Result<Arc<dyn ChatBackend>> {
    Ok(match config {
        BackendConfig::Mock { playbooks, latency_ms } => {
            let mock = MockBackend::load_dir(playbooks)
                .with_context(|| format!("loading playbooks from {}", playbooks.display()))?;
            Arc::new(mock.with_latency(Duration::from_millis(*latency_ms)))
        }
        BackendConfig::Http(http) => Arc::new(HttpBackend::new(http.clone())?),
        BackendConfig::Record { cassettes, http } => {
            Arc::new(CassetteBackend::record(HttpBackend::new(http.clone())?, cassettes.clone()))
        }
        BackendConfig::Replay { cassettes } => Arc::new(CassetteBackend::<HttpBackend>::replay(cassettes.clone())),
    })
}
