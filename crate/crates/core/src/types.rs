//! Pipeline data model shared by every stage.
//!
//! All values here are plain data: once built they are never mutated in
//! place, so they can be cloned freely and sent across worker threads.

use std::collections::BTreeSet;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::TokenUsage;

/// Version stamped into every persisted document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContractError {
    #[error("instance id must be nonempty")]
    EmptyInstanceId,
    #[error("duplicate instance id `{0}`")]
    DuplicateInstanceId(String),
    #[error("codebase snapshot `{0}` is not a readable directory")]
    MissingSnapshot(PathBuf),
    #[error("path `{0}` must be relative without `..` segments")]
    BadRelativePath(String),
    #[error("gold file `{0}` does not exist in the snapshot")]
    MissingGoldFile(String),
    #[error("search text of a search/replace block must be nonempty")]
    EmptySearch,
    #[error("index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Which files of a snapshot take part in the relevance scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFilter {
    /// Allowed file extensions without the leading dot.
    #[serde(default = "SourceFilter::default_extensions")]
    pub extensions: Vec<String>,
    /// Directory names whose contents are skipped at any depth.
    #[serde(default = "SourceFilter::default_excluded_dirs")]
    pub exclude_dirs: Vec<String>,
}

impl SourceFilter {
    fn default_extensions() -> Vec<String> {
        vec!["py".to_string()]
    }

    fn default_excluded_dirs() -> Vec<String> {
        ["test", "tests", "testing", ".git"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn accepts(&self, rel_path: &str) -> bool {
        let path = Path::new(rel_path);
        let mut components: Vec<&str> = path
            .components()
            .filter_map(|c| match c {
                Component::Normal(s) => s.to_str(),
                _ => None,
            })
            .collect();
        let Some(file_name) = components.pop() else {
            return false;
        };
        if components
            .iter()
            .any(|dir| self.exclude_dirs.iter().any(|ex| ex == dir))
        {
            return false;
        }
        let ext = Path::new(file_name)
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("");
        self.extensions.iter().any(|allowed| allowed == ext)
    }
}

impl Default for SourceFilter {
    fn default() -> Self {
        Self {
            extensions: Self::default_extensions(),
            exclude_dirs: Self::default_excluded_dirs(),
        }
    }
}

/// Ground-truth evaluation command run inside a workspace with an edit applied.
///
/// `argv` may contain `{workspace}`, replaced with the workspace root at run time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCommand {
    pub argv: Vec<String>,
}

/// One issue-resolution task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: String,
    pub issue_text: String,
    pub codebase_ref: PathBuf,
    #[serde(default)]
    pub source_file_filter: SourceFilter,
    #[serde(default)]
    pub gold_edit_files: Option<BTreeSet<String>>,
    #[serde(default)]
    pub oracle_eval: Option<OracleCommand>,
}

impl Instance {
    pub fn validate(&self) -> Result<(), ContractError> {
        if self.instance_id.trim().is_empty() {
            return Err(ContractError::EmptyInstanceId);
        }
        if !self.codebase_ref.is_dir() {
            return Err(ContractError::MissingSnapshot(self.codebase_ref.clone()));
        }
        if let Some(gold) = &self.gold_edit_files {
            for file in gold {
                check_relative(file)?;
                if !self.codebase_ref.join(file).is_file() {
                    return Err(ContractError::MissingGoldFile(file.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Validates a dataset as a whole: every instance valid, ids unique.
pub fn validate_dataset(instances: &[Instance]) -> Result<(), ContractError> {
    let mut seen = BTreeSet::new();
    for instance in instances {
        instance.validate()?;
        if !seen.insert(instance.instance_id.as_str()) {
            return Err(ContractError::DuplicateInstanceId(
                instance.instance_id.clone(),
            ));
        }
    }
    Ok(())
}

pub(crate) fn check_relative(path: &str) -> Result<(), ContractError> {
    let p = Path::new(path);
    let ok = !path.is_empty()
        && p.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(ContractError::BadRelativePath(path.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchReplaceBlock {
    pub file_path: String,
    pub search_text: String,
    pub replace_text: String,
}

impl SearchReplaceBlock {
    pub fn new(
        file_path: impl Into<String>,
        search_text: impl Into<String>,
        replace_text: impl Into<String>,
    ) -> Result<Self, ContractError> {
        let block = Self {
            file_path: file_path.into(),
            search_text: search_text.into(),
            replace_text: replace_text.into(),
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        check_relative(&self.file_path)?;
        if self.search_text.is_empty() {
            return Err(ContractError::EmptySearch);
        }
        Ok(())
    }
}

/// A codebase edit.
///
/// Native edits carry ordered search/replace blocks and get `unified_diff`
/// filled in once applied. Edits imported from other systems carry only a
/// pre-rendered unified diff and no blocks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub blocks: Vec<SearchReplaceBlock>,
    #[serde(default)]
    pub unified_diff: String,
}

impl Edit {
    pub fn from_blocks(blocks: Vec<SearchReplaceBlock>) -> Self {
        Self {
            blocks,
            unified_diff: String::new(),
        }
    }

    pub fn from_patch(patch: impl Into<String>) -> Self {
        Self {
            blocks: Vec::new(),
            unified_diff: patch.into(),
        }
    }

    /// True for imported edits that must be applied as a patch.
    pub fn is_patch(&self) -> bool {
        self.blocks.is_empty() && !self.unified_diff.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty() && self.unified_diff.is_empty()
    }

    /// Length of the rendered diff in characters; the "shorter diff" key.
    pub fn diff_len(&self) -> usize {
        self.unified_diff.chars().count()
    }

    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for block in &self.blocks {
            for part in [&block.file_path, &block.search_text, &block.replace_text] {
                hasher.update((part.len() as u64).to_le_bytes());
                hasher.update(part.as_bytes());
            }
        }
        if self.blocks.is_empty() {
            hasher.update(self.unified_diff.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Distinct files touched by the blocks or the patch, sorted.
    pub fn touched_files(&self) -> Vec<String> {
        let mut files: BTreeSet<String> = self
            .blocks
            .iter()
            .map(|b| b.file_path.clone())
            .collect();
        if self.blocks.is_empty() {
            for line in self.unified_diff.lines() {
                if let Some(rest) = line.strip_prefix("+++ ").or_else(|| line.strip_prefix("--- ")) {
                    let name = rest.split('\t').next().unwrap_or(rest).trim();
                    if name == "/dev/null" {
                        continue;
                    }
                    let name = name
                        .strip_prefix("a/")
                        .or_else(|| name.strip_prefix("b/"))
                        .unwrap_or(name);
                    files.insert(name.to_string());
                }
            }
        }
        files.into_iter().collect()
    }
}

/// Standalone reproduction script. Exit 0 means fixed, exit 2 means the
/// issue is present, anything else (or a timeout) means the test is broken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestScript {
    pub script_text: String,
}

impl TestScript {
    pub fn new(script_text: impl Into<String>) -> Self {
        Self {
            script_text: script_text.into(),
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.script_text.as_bytes()))
    }
}

pub const EXIT_FIXED: i32 = 0;
pub const EXIT_ISSUE_PRESENT: i32 = 2;

/// How a test run reads under the exit-code contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSignal {
    Fixed,
    IssuePresent,
    Broken,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
    /// Not persisted: it is the only nondeterministic field.
    #[serde(skip)]
    pub wall_time: f64,
    pub timed_out: bool,
}

impl ExecutionResult {
    pub fn signal(&self) -> TestSignal {
        if self.timed_out {
            return TestSignal::TimedOut;
        }
        match self.exit_code {
            Some(EXIT_FIXED) => TestSignal::Fixed,
            Some(EXIT_ISSUE_PRESENT) => TestSignal::IssuePresent,
            _ => TestSignal::Broken,
        }
    }

    /// Text shown to a model as execution feedback.
    pub fn render(&self) -> String {
        let status = if self.timed_out {
            "TIMED OUT (no exit code)".to_string()
        } else {
            match self.exit_code {
                Some(code) => format!("exit code {code}"),
                None => "terminated by signal".to_string(),
            }
        };
        format!(
            "status: {status}\n--- stdout ---\n{}\n--- stderr ---\n{}",
            self.stdout, self.stderr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// A parsed model action. Which kinds are allowed depends on the machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "payload")]
pub enum Action {
    WriteTest(TestScript),
    WriteEdit(Edit),
    Approve,
    Select(usize),
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::WriteTest(_) => "write_test",
            Action::WriteEdit(_) => "write_edit",
            Action::Approve => "approve",
            Action::Select(_) => "select",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default)]
    pub parsed_action: Option<Action>,
}

impl Turn {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            usage: TokenUsage::default(),
            parsed_action: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MachineKind {
    Testing,
    Editing,
    Selection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Approved,
    Exhausted,
    /// Selection machine chose a candidate.
    Selected,
    MalformedFailure,
}

/// Machine state after one assistant completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    /// 1-based completion index.
    pub completion: usize,
    pub test: Option<TestScript>,
    pub edit: Option<Edit>,
    pub selection: Option<usize>,
    #[serde(default)]
    pub malformed: bool,
    /// Selection machine only: per-candidate count of its tests passed so far.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub trajectory_id: String,
    pub instance_id: String,
    pub machine_kind: MachineKind,
    pub turns: Vec<Turn>,
    pub iteration_snapshots: Vec<IterationSnapshot>,
    /// `None` while the machine is still running.
    pub terminal_status: Option<TerminalStatus>,
    pub completions_used: usize,
    pub max_completions: usize,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Trajectory {
    pub fn new(
        trajectory_id: impl Into<String>,
        instance_id: impl Into<String>,
        machine_kind: MachineKind,
        max_completions: usize,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            trajectory_id: trajectory_id.into(),
            instance_id: instance_id.into(),
            machine_kind,
            turns: Vec::new(),
            iteration_snapshots: Vec::new(),
            terminal_status: None,
            completions_used: 0,
            max_completions,
            notes: Vec::new(),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.terminal_status.is_some()
    }

    pub fn final_snapshot(&self) -> Option<&IterationSnapshot> {
        self.iteration_snapshots.last()
    }

    pub fn final_test(&self) -> Option<&TestScript> {
        self.final_snapshot().and_then(|s| s.test.as_ref())
    }

    pub fn final_edit(&self) -> Option<&Edit> {
        self.final_snapshot().and_then(|s| s.edit.as_ref())
    }

    pub fn assistant_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::Assistant)
    }

    /// Summed usage over all assistant turns.
    pub fn total_usage(&self) -> TokenUsage {
        self.assistant_turns()
            .fold(TokenUsage::default(), |acc, t| acc + t.usage)
    }

    /// Summed usage over the first `completions` assistant turns.
    pub fn usage_through(&self, completions: usize) -> TokenUsage {
        self.assistant_turns()
            .take(completions)
            .fold(TokenUsage::default(), |acc, t| acc + t.usage)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "name")]
pub enum CandidateSource {
    Native,
    External(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub candidate_id: String,
    pub instance_id: String,
    pub edit: Edit,
    pub test: Option<TestScript>,
    pub source: CandidateSource,
    pub trajectory_id: Option<String>,
}

impl CandidateSample {
    /// Deterministic ordering key: shorter diff first, then candidate id.
    pub fn tie_break_key(&self) -> (usize, &str) {
        (self.edit.diff_len(), self.candidate_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectnessRecord {
    pub instance_id: String,
    pub correct: Vec<bool>,
}

impl CorrectnessRecord {
    pub fn any_correct(&self) -> bool {
        self.correct.iter().any(|&c| c)
    }
}

/// Whether the submitted candidate resolves the instance.
pub fn is_resolved(
    correctness: &CorrectnessRecord,
    selected_index: usize,
) -> Result<bool, ContractError> {
    correctness
        .correct
        .get(selected_index)
        .copied()
        .ok_or(ContractError::IndexOutOfRange {
            index: selected_index,
            len: correctness.correct.len(),
        })
}
