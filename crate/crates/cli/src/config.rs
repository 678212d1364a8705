//! Run configuration, read from a TOML file. Relative paths are resolved
//! against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use monkeys_core::context::ContextConfig;
use monkeys_core::llm::{HttpConfig, PriceTable};
use monkeys_core::machines::MachineConfig;
use monkeys_core::sandbox::SandboxConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Directory of instance descriptors.
    pub dataset: PathBuf,
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    #[serde(default)]
    pub stages: StageConfig,
    #[serde(default)]
    pub sandbox: SandboxConfig,
    pub backends: Backends,
    #[serde(default)]
    pub prices: PriceTable,
    #[serde(default)]
    pub workers: WorkerConfig,
    #[serde(default)]
    pub retry: RetryConfig,
    /// Directory of prompt template overrides.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub machines_per_instance: usize,
    pub generation: MachineConfig,
    pub selection: MachineConfig,
    /// Temperature for single-turn model selection.
    pub model_select_temperature: f64,
    pub top_k: usize,
    pub context: ContextConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            machines_per_instance: 10,
            generation: MachineConfig::generation(),
            selection: MachineConfig::selection(),
            model_select_temperature: 0.0,
            top_k: monkeys_core::selection::DEFAULT_TOP_K,
            context: ContextConfig::default(),
        }
    }
}

/// The relevance scan can use a cheaper model than everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backends {
    pub scanner: BackendConfig,
    pub primary: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Scripted playbooks from a directory of TOML files.
    Mock {
        playbooks: PathBuf,
        #[serde(default)]
        latency_ms: u64,
    },
    Http(HttpConfig),
    /// Live backend whose exchanges are saved for later replay.
    Record { cassettes: PathBuf, http: HttpConfig },
    Replay { cassettes: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkerConfig {
    /// Instances processed at once by per-instance stages.
    pub instances: usize,
    /// (instance, machine) units in flight during generation.
    pub machines: usize,
    /// Concurrent backend requests across all stages and backends.
    pub backend_requests: usize,
    /// Sandbox executions at once when building vote matrices.
    pub sandbox: usize,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            instances: 2,
            machines: 4,
            backend_requests: 8,
            sandbox: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryConfig {
    pub attempts: u32,
    pub base_delay_s: f64,
    pub factor: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_s: 1.0,
            factor: 2.0,
        }
    }
}

impl RetryConfig {
    pub fn policy(&self) -> monkeys_core::llm::RetryPolicy {
        monkeys_core::llm::RetryPolicy {
            attempts: self.attempts,
            base_delay: std::time::Duration::from_secs_f64(self.base_delay_s.max(0.0)),
            factor: self.factor,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).context("invalid run config")?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.runs_dir);
        if let Some(p) = self.prompts_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.sandbox.workspace_root.as_mut() {
            fix(p);
        }
        for backend in [&mut self.backends.scanner, &mut self.backends.primary] {
            match backend {
                BackendConfig::Mock { playbooks, .. } => fix(playbooks),
                BackendConfig::Record { cassettes, .. } | BackendConfig::Replay { cassettes } => fix(cassettes),
                BackendConfig::Http(_) => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let id_ok = !self.run_id.is_empty()
            && self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !self.run_id.starts_with('.');
        if !id_ok {
            bail!("run_id `{}` must be a plain name of letters, digits, '-', '_' or '.'", self.run_id);
        }
        let s = &self.stages;
        if s.machines_per_instance == 0 {
            bail!("stages.machines_per_instance must be at least 1");
        }
        if s.top_k == 0 {
            bail!("stages.top_k must be at least 1");
        }
        s.generation
            .validate()
            .map_err(|e| anyhow::anyhow!("stages.generation: {e}"))?;
        s.selection
            .validate()
            .map_err(|e| anyhow::anyhow!("stages.selection: {e}"))?;
        if !(0.0..=2.0).contains(&s.model_select_temperature) {
            bail!("stages.model_select_temperature must be within [0, 2]");
        }
        let c = &s.context;
        if c.repetitions == 0 || c.cap == 0 || c.chunk_tokens == 0 {
            bail!("stages.context: repetitions, cap and chunk_tokens must be positive");
        }
        self.sandbox.validate().map_err(|e| anyhow::anyhow!(e))?;
        self.prices.validate().map_err(|e| anyhow::anyhow!(e))?;
        let w = &self.workers;
        if w.instances == 0 || w.machines == 0 || w.backend_requests == 0 || w.sandbox == 0 {
            bail!("workers: every limit must be at least 1");
        }
        if self.retry.attempts == 0 {
            bail!("retry.attempts must be at least 1");
        }
        Ok(())
    }

    pub fn run_root(&self) -> PathBuf {
        self.runs_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
run_id = "demo"
dataset = "data"

[backends.scanner]
kind = "mock"
playbooks = "pb"

[backends.primary]
kind = "mock"
playbooks = "pb"
"#;

    #[test]
    fn defaults_follow_the_pipeline() {
        let c = RunConfig::parse(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(c.stages.machines_per_instance, 10);
        assert_eq!(c.stages.generation.max_completions, 8);
        assert_eq!(c.stages.generation.temperature, 0.5);
        assert_eq!(c.stages.selection.max_completions, 10);
        assert_eq!(c.stages.selection.temperature, 0.0);
        assert_eq!(c.stages.context.repetitions, 3);
        assert_eq!(c.stages.context.cap, 128_000);
        assert_eq!(c.stages.context.target_tokens, 60_000);
        assert_eq!(c.sandbox.timeout_s, 100.0);
        assert_eq!(c.dataset, Path::new("/base/data"));
        assert_eq!(c.run_root(), Path::new("/base/runs/demo"));
        assert_eq!(
            c.backends.scanner,
            BackendConfig::Mock {
                playbooks: "/base/pb".into(),
                latency_ms: 0
            }
        );
    }

    #[test]
    fn full_example_parses() {
        let text = r#"
run_id = "demo"
dataset = "dataset"

[backends.scanner]
kind = "http"
flavor = "openai"
base_url = "http://localhost:8000/v1"
model = "small-model"
api_key_env = "SCANNER_KEY"

[backends.primary]
kind = "replay"
cassettes = "cassettes"

[stages]
machines_per_instance = 4
top_k = 3
[stages.generation]
max_completions = 8
temperature = 0.5
timeout_s = 100
[stages.selection]
max_completions = 10
temperature = 0.0
timeout_s = 100

[sandbox]
timeout_s = 100
interpreter = ["python3", "{script}"]

[workers]
instances = 2
machines = 4
backend_requests = 8
sandbox = 4

[prices]
input = 3.0
output = 15.0
cache_read = 0.3
cache_write = 3.75
"#;
        let c = RunConfig::parse(text, Path::new("/base")).unwrap();
        assert!(matches!(&c.backends.scanner, BackendConfig::Http(h) if h.model == "small-model"));
        assert_eq!(
            c.backends.primary,
            BackendConfig::Replay {
                cassettes: "/base/cassettes".into()
            }
        );
        assert_eq!(c.stages.machines_per_instance, 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            MINIMAL.replace("\"demo\"", "\"../x\""),
            format!("{MINIMAL}\n[stages]\nmachines_per_instance = 0\n"),
            format!("{MINIMAL}\n[workers]\nbackend_requests = 0\n"),
            format!("{MINIMAL}\n[stages.generation]\nmax_completions = 0\ntemperature = 0.5\ntimeout_s = 100\n"),
            format!("{MINIMAL}\nbogus = 1\n"),
        ];
        for text in bad {
            assert!(RunConfig::parse(&text, Path::new("/")).is_err(), "{text}");
        }
    }
}
