//! On-disk run store. Every artifact is a pretty-printed JSON document
//! written atomically (temp file, then rename), so a crash never leaves a
//! half-written artifact behind.
//!
//! ```text
//! runs/<run_id>/
//!   config.toml  ledger.json  reports/
//!   instances/<instance_id>/
//!     context.json  candidates.json  correctness.json  matrix.json
//!     selection-<method>.json  metrics.json
//!     trajectories/{testing,editing}-NN.json  trajectories/select-<method>.json
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use monkeys_core::selection::SelectionMethod;
use monkeys_core::MachineKind;
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const CONTEXT: &str = "context.json";
pub const CANDIDATES: &str = "candidates.json";
pub const CORRECTNESS: &str = "correctness.json";
pub const MATRIX: &str = "matrix.json";
pub const METRICS: &str = "metrics.json";
pub const ENSEMBLE_CANDIDATES: &str = "ensemble-candidates.json";

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn instance_dir(&self, instance_id: &str) -> PathBuf {
        self.root.join("instances").join(instance_id)
    }

    pub fn artifact(&self, instance_id: &str, name: &str) -> PathBuf {
        self.instance_dir(instance_id).join(name)
    }

    pub fn trajectory_path(&self, instance_id: &str, kind: MachineKind, index: usize) -> PathBuf {
        let kind = match kind {
            MachineKind::Testing => "testing",
            MachineKind::Editing => "editing",
            MachineKind::Selection => "selection",
        };
        self.instance_dir(instance_id)
            .join("trajectories")
            .join(format!("{kind}-{index:02}.json"))
    }

    pub fn selection_trajectory_path(&self, instance_id: &str, method: SelectionMethod) -> PathBuf {
        self.instance_dir(instance_id)
            .join("trajectories")
            .join(format!("select-{}.json", method.name()))
    }

    pub fn selection_path(&self, instance_id: &str, method: SelectionMethod) -> PathBuf {
        self.artifact(instance_id, &format!("selection-{}.json", method.name()))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    /// Ids of instances that have a directory in the store.
    pub fn instance_ids(&self) -> Result<Vec<String>> {
        let dir = self.root.join("instances");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// All trajectory files of an instance in name order.
    pub fn trajectory_files(&self, instance_id: &str) -> Result<Vec<PathBuf>> {
        let dir = self.instance_dir(instance_id).join("trajectories");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        Ok(files)
    }
}

/// Removes temp files left behind by a writer that was killed mid-write.
/// A run store has a single writer, so any temp file present is stale.
pub fn remove_stale_temps(root: &Path) -> Result<usize> {
    if !root.is_dir() {
        return Ok(0);
    }
    let mut removed = 0;
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('.') && n.contains(".tmp-"))
            {
                std::fs::remove_file(&path)?;
                removed += 1;
            }
        }
    }
    Ok(removed)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().context("artifact path has no parent")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path.file_name().context("artifact path has no file name")?.to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// `None` when the file does not exist.
pub fn read_json_opt<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    read_json(path).map(Some)
}
