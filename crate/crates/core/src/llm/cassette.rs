//! Record live exchanges to disk and replay them later without a network.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatBackend, ChatRequest, Completion, LlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CassetteMode {
    /// Forward to the inner backend and persist every exchange.
    Record,
    /// Serve from disk only; a missing cassette is an error.
    Replay,
}

#[derive(Serialize, Deserialize)]
struct Cassette {
    schema_version: u32,
    digest: String,
    request: ChatRequest,
    completion: Completion,
}

/// Key for a request: SHA-256 over its canonical JSON. The conversation key is
/// included, so identical prompts sampled in different conversations replay
/// their own responses.
pub fn request_digest(request: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

pub struct CassetteBackend<B> {
    inner: Option<B>,
    dir: PathBuf,
    mode: CassetteMode,
}

impl<B: ChatBackend> CassetteBackend<B> {
    pub fn record(inner: B, dir: impl Into<PathBuf>) -> Self {
        Self {
            inner: Some(inner),
            dir: dir.into(),
            mode: CassetteMode::Record,
        }
    }

    pub fn replay(dir: impl Into<PathBuf>) -> Self {
        Self {
            inner: None,
            dir: dir.into(),
            mode: CassetteMode::Replay,
        }
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }
}

fn read_cassette(path: &Path) -> Result<Option<Completion>, LlmError> {
    match std::fs::read_to_string(path) {
        Ok(text) => {
            let c: Cassette = serde_json::from_str(&text)
                .map_err(|e| LlmError::Io(format!("{}: {e}", path.display())))?;
            Ok(Some(c.completion))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(LlmError::Io(e.to_string())),
    }
}

impl<B: ChatBackend> ChatBackend for CassetteBackend<B> {
    fn send(&self, request: &ChatRequest) -> Result<Completion, LlmError> {
        let digest = request_digest(request);
        let path = self.path_for(&digest);
        if let Some(done) = read_cassette(&path)? {
            return Ok(done);
        }
        let inner = match (self.mode, &self.inner) {
            (CassetteMode::Record, Some(inner)) => inner,
            _ => return Err(LlmError::CassetteMiss(digest)),
        };
        let completion = inner.send(request)?;
        let cassette = Cassette {
            schema_version: crate::types::SCHEMA_VERSION,
            digest,
            request: request.clone(),
            completion: completion.clone(),
        };
        std::fs::create_dir_all(&self.dir).map_err(|e| LlmError::Io(e.to_string()))?;
        let text = serde_json::to_string_pretty(&cassette).expect("cassette serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| LlmError::Io(e.to_string()))?;
        Ok(completion)
    }
}
