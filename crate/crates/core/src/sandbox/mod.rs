//! Private codebase copies, edit application, and script execution.
//!
//! Isolation is a private working directory plus a dedicated process group
//! per script, with a minimal environment. Nothing here mutates an instance
//! snapshot; every operation works on a disposable copy.

mod apply;
mod exec;
mod patch;
mod workspace;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use apply::{apply_edit, render_file_diff, ApplyError};
pub use exec::{evaluate_candidate, run_command, run_script, Evaluation};
pub use patch::{parse_patch, unified_diff, FilePatch, PatchError};
pub use workspace::{materialize, tree_digest, Workspace};

pub const DEFAULT_OUTPUT_CAP: usize = 20_000;
pub const DEFAULT_TIMEOUT_S: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    /// Interpreter argv; `{script}` is replaced with the script path.
    #[serde(default = "SandboxConfig::default_interpreter")]
    pub interpreter: Vec<String>,
    #[serde(default = "SandboxConfig::default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "SandboxConfig::default_cap")]
    pub output_cap_bytes: usize,
    /// Variables copied from the parent environment in addition to PATH.
    #[serde(default)]
    pub env_allowlist: Vec<String>,
    /// Parent directory for workspaces; the system temp dir when unset.
    #[serde(default)]
    pub workspace_root: Option<PathBuf>,
}

impl SandboxConfig {
    fn default_interpreter() -> Vec<String> {
        vec!["python3".into(), "{script}".into()]
    }

    fn default_timeout() -> f64 {
        DEFAULT_TIMEOUT_S
    }

    fn default_cap() -> usize {
        DEFAULT_OUTPUT_CAP
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s.max(0.0))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.interpreter.is_empty() {
            return Err("sandbox.interpreter must name a program".into());
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err("sandbox.timeout_s must be positive".into());
        }
        Ok(())
    }
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: Self::default_interpreter(),
            timeout_s: DEFAULT_TIMEOUT_S,
            output_cap_bytes: DEFAULT_OUTPUT_CAP,
            env_allowlist: Vec::new(),
            workspace_root: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to materialize {path}: {source}")]
    Materialize {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("interpreter `{0}` not found")]
    InterpreterNotFound(String),
    #[error("instance has no oracle evaluation command")]
    NoOracle,
    #[error("evaluation infrastructure failure: {0}")]
    Evaluation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
