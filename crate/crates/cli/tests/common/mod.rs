#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use monkeys_cli::{RunConfig, Runner};
use monkeys_core::llm::MockBackend;

pub const HAPPY: [&str; 4] = ["bounds", "calc", "stats", "text"];

pub fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// A private copy of the toy fixture; runs write into `<dir>/runs/toy`.
pub fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    dir
}

/// Same fixture with edited config text.
pub fn fixture_with(edit: impl FnOnce(String) -> String) -> tempfile::TempDir {
    let dir = fixture();
    let path = dir.path().join("monkeys.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, edit(text)).unwrap();
    dir
}

pub fn config_path(dir: &Path) -> PathBuf {
    dir.join("monkeys.toml")
}

pub fn store_root(dir: &Path) -> PathBuf {
    dir.join("runs/toy")
}

pub fn mock(dir: &Path) -> Arc<MockBackend> {
    Arc::new(MockBackend::load_dir(&dir.join("playbooks")).unwrap())
}

/// In-process runner over one shared mock so tests can count calls.
pub fn runner(dir: &Path, backend: Arc<MockBackend>) -> Runner {
    build_runner(dir, backend, None)
}

/// Only the first `limit` instances by id.
pub fn runner_limited(dir: &Path, limit: usize, backend: Arc<MockBackend>) -> Runner {
    build_runner(dir, backend, Some(limit))
}

fn build_runner(dir: &Path, backend: Arc<MockBackend>, limit: Option<usize>) -> Runner {
    let path = config_path(dir);
    let text = std::fs::read_to_string(&path).unwrap();
    let config = RunConfig::parse(&text, dir).unwrap();
    Runner::with_backends(config, text, backend.clone(), backend, limit, false).unwrap()
}

pub fn monkeys(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monkeys"))
        .current_dir(dir)
        .args(["-c", "monkeys.toml"])
        .args(args)
        .output()
        .unwrap()
}

pub fn monkeys_ok(dir: &Path, args: &[&str]) -> String {
    let out = monkeys(dir, args);
    assert!(
        out.status.success(),
        "monkeys {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Names of files that differ between two trees, including one-sided ones.
pub fn tree_diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .cloned()
        .collect()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
