//! Choosing one candidate edit per instance: vote matrices, majority
//! voting, top-k filtering, single-turn model selection, the selection
//! machine, and ingestion of edits from other systems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{complete, ChatBackend, ChatMessage, ChatRequest, RetryPolicy};
use crate::machines::{
    action_instructions, parse_action, render_candidates, resume_selection_machine, MachineConfig, MachineEnv,
    MachineError, Sink,
};
use crate::pool::parallel_map;
use crate::prompts::{PromptError, Prompts};
use crate::sandbox::{apply_edit, materialize, parse_patch, run_script, SandboxConfig};
use crate::types::{
    Action, CandidateSample, CandidateSource, Edit, Instance, MachineKind, Role, TerminalStatus, TestScript,
    TestSignal, Trajectory, Turn, SCHEMA_VERSION,
};

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellOutcome {
    /// Exit code 0 with the candidate applied.
    Pass,
    /// Exit code 2.
    Fail,
    /// Any other exit, an apply failure, or an infrastructure error.
    Error,
    Timeout,
}

impl CellOutcome {
    fn from_signal(signal: TestSignal) -> Self {
        match signal {
            TestSignal::Fixed => CellOutcome::Pass,
            TestSignal::IssuePresent => CellOutcome::Fail,
            TestSignal::Broken => CellOutcome::Error,
            TestSignal::TimedOut => CellOutcome::Timeout,
        }
    }
}

/// Outcome of every test on every candidate. Rows are candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteMatrix {
    pub schema_version: u32,
    pub instance_id: String,
    pub candidate_ids: Vec<String>,
    /// Rendered diff length per candidate, for tie-breaks.
    pub diff_lens: Vec<usize>,
    /// Candidate id each test came from.
    pub test_sources: Vec<String>,
    pub outcomes: Vec<Vec<CellOutcome>>,
    pub pass_counts: Vec<usize>,
}

impl VoteMatrix {
    pub fn from_outcomes(
        instance_id: &str,
        candidates: &[CandidateSample],
        test_sources: Vec<String>,
        outcomes: Vec<Vec<CellOutcome>>,
    ) -> Self {
        let pass_counts = outcomes
            .iter()
            .map(|row| row.iter().filter(|c| **c == CellOutcome::Pass).count())
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            instance_id: instance_id.to_string(),
            candidate_ids: candidates.iter().map(|c| c.candidate_id.clone()).collect(),
            diff_lens: candidates.iter().map(|c| c.edit.diff_len()).collect(),
            test_sources,
            outcomes,
            pass_counts,
        }
    }

    pub fn len(&self) -> usize {
        self.candidate_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidate_ids.is_empty()
    }

    /// Candidate indices by (pass count desc, diff length asc, id asc).
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.pass_counts[b]
                .cmp(&self.pass_counts[a])
                .then(self.diff_lens[a].cmp(&self.diff_lens[b]))
                .then_with(|| self.candidate_ids[a].cmp(&self.candidate_ids[b]))
        });
        order
    }
}

/// The tests to vote with: each candidate's own test, where it has one.
pub fn candidate_tests(candidates: &[CandidateSample]) -> Vec<(String, TestScript)> {
    candidates
        .iter()
        .filter_map(|c| c.test.clone().map(|t| (c.candidate_id.clone(), t)))
        .collect()
}

/// Runs every test on a fresh copy of every candidate.
pub fn build_vote_matrix(
    instance: &Instance,
    candidates: &[CandidateSample],
    tests: &[(String, TestScript)],
    sandbox: &SandboxConfig,
    workers: usize,
) -> VoteMatrix {
    let applies: Vec<bool> = parallel_map(candidates, workers, |_, c| {
        materialize(&instance.codebase_ref, sandbox)
            .map(|mut ws| apply_edit(&mut ws, &mut c.edit.clone()).is_ok())
            .unwrap_or(false)
    });
    // Identical (edit, test) pairs are run once; candidates often repeat.
    let edit_keys: Vec<String> = candidates.iter().map(|c| c.edit.digest()).collect();
    let test_keys: Vec<String> = tests.iter().map(|(_, t)| t.digest()).collect();
    let mut unique: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for i in (0..candidates.len()).filter(|&i| applies[i]) {
        for (j, test_key) in test_keys.iter().enumerate() {
            unique.entry((&edit_keys[i], test_key)).or_insert((i, j));
        }
    }
    let cells: Vec<(usize, usize)> = unique.values().copied().collect();
    let results = parallel_map(&cells, workers, |_, &(i, j)| {
        let run = || -> Result<CellOutcome, String> {
            let mut ws = materialize(&instance.codebase_ref, sandbox).map_err(|e| e.to_string())?;
            apply_edit(&mut ws, &mut candidates[i].edit.clone()).map_err(|e| e.to_string())?;
            let r = run_script(&mut ws, &tests[j].1, sandbox).map_err(|e| e.to_string())?;
            Ok(CellOutcome::from_signal(r.signal()))
        };
        run().unwrap_or(CellOutcome::Error)
    });
    let by_key: BTreeMap<(&str, &str), CellOutcome> = unique.keys().copied().zip(results).collect();
    let outcomes = (0..candidates.len())
        .map(|i| {
            (0..tests.len())
                .map(|j| match applies[i] {
                    true => by_key[&(edit_keys[i].as_str(), test_keys[j].as_str())],
                    false => CellOutcome::Error,
                })
                .collect()
        })
        .collect();
    VoteMatrix::from_outcomes(
        &instance.instance_id,
        candidates,
        tests.iter().map(|(id, _)| id.clone()).collect(),
        outcomes,
    )
}

/// Deployment winner: most tests passed, then shorter diff, then id.
pub fn majority_vote(matrix: &VoteMatrix) -> usize {
    matrix.ranked()[0]
}

/// Expected correctness of picking uniformly among the top-count candidates.
pub fn majority_expected_score(pass_counts: &[usize], correct: &[bool]) -> f64 {
    assert_eq!(pass_counts.len(), correct.len(), "one flag per candidate");
    let Some(&best) = pass_counts.iter().max() else {
        return 0.0;
    };
    let tied: Vec<usize> = (0..pass_counts.len()).filter(|&i| pass_counts[i] == best).collect();
    let hits = tied.iter().filter(|&&i| correct[i]).count();
    hits as f64 / tied.len() as f64
}

/// Up to `k` candidate indices in ranked order.
pub fn top_k_filter(matrix: &VoteMatrix, k: usize) -> Vec<usize> {
    let mut order = matrix.ranked();
    order.truncate(k);
    order
}

/// The test from the highest-ranked candidate that has one.
pub fn example_test(matrix: &VoteMatrix, candidates: &[CandidateSample]) -> Option<TestScript> {
    matrix.ranked().into_iter().find_map(|i| candidates[i].test.clone())
}

/// Index of the shortest diff, ties by id.
pub fn shortest_diff(candidates: &[CandidateSample]) -> usize {
    (0..candidates.len())
        .min_by(|&a, &b| candidates[a].tie_break_key().cmp(&candidates[b].tie_break_key()))
        .expect("at least one candidate")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSelection {
    pub index: usize,
    pub fallback: bool,
    pub trajectory: Trajectory,
}

/// One prompt with every candidate; one correction on a malformed reply,
/// then the shortest diff.
#[allow(clippy::too_many_arguments)]
pub fn model_select_single_turn(
    instance: &Instance,
    conversation: &str,
    candidates: &[CandidateSample],
    context: &str,
    backend: &dyn ChatBackend,
    retry: &RetryPolicy,
    prompts: &Prompts,
    temperature: f64,
) -> Result<ModelSelection, PromptError> {
    assert!(!candidates.is_empty(), "at least one candidate");
    let mut traj = Trajectory::new(conversation, &instance.instance_id, MachineKind::Selection, 2);
    traj.turns.push(Turn::user(prompts.render(
        "model_select",
        &[
            ("issue", &instance.issue_text),
            ("context", context),
            ("candidates", &render_candidates(candidates)),
        ],
    )?));
    let actions = action_instructions(prompts, &["select"])?;
    for attempt in 0..2 {
        let messages = traj
            .turns
            .iter()
            .map(|t| ChatMessage::new(t.role, t.content.clone()))
            .collect();
        let request = ChatRequest::new(conversation, messages, temperature);
        let done = match complete(&request, backend, retry) {
            Ok(done) => done,
            Err(e) => {
                traj.notes.push(format!("backend failure: {e}"));
                break;
            }
        };
        traj.completions_used += 1;
        let parsed = parse_action(&done.text).and_then(|a| match a {
            Action::Select(i) if i < candidates.len() => Ok(i),
            Action::Select(i) => Err(format!("candidate {i} does not exist")),
            other => Err(format!("`{}` is not available here", other.name())),
        });
        traj.turns.push(Turn {
            role: Role::Assistant,
            content: done.text,
            usage: done.usage,
            parsed_action: parsed.as_ref().ok().map(|&i| Action::Select(i)),
        });
        match parsed {
            Ok(index) => {
                traj.terminal_status = Some(TerminalStatus::Selected);
                return Ok(ModelSelection {
                    index,
                    fallback: false,
                    trajectory: traj,
                });
            }
            Err(reason) if attempt == 0 => {
                traj.turns.push(Turn::user(
                    prompts.render("correction", &[("reason", &reason), ("actions", &actions)])?,
                ));
            }
            Err(_) => {}
        }
    }
    traj.terminal_status = Some(TerminalStatus::MalformedFailure);
    Ok(ModelSelection {
        index: shortest_diff(candidates),
        fallback: true,
        trajectory: traj,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Majority,
    Model,
    ModelTop3,
    MachineTop3,
    /// Selection machine over pooled candidates from several systems.
    Ensemble,
}

impl SelectionMethod {
    pub const NATIVE: [SelectionMethod; 4] = [
        SelectionMethod::Majority,
        SelectionMethod::Model,
        SelectionMethod::ModelTop3,
        SelectionMethod::MachineTop3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMethod::Majority => "majority",
            SelectionMethod::Model => "model",
            SelectionMethod::ModelTop3 => "model_top3",
            SelectionMethod::MachineTop3 => "machine_top3",
            SelectionMethod::Ensemble => "ensemble",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Self::NATIVE.as_slice(), &[SelectionMethod::Ensemble]]
            .concat()
            .into_iter()
            .find(|m| m.name() == name)
    }

    /// Whether the method makes backend calls.
    pub fn uses_model(self) -> bool {
        self != SelectionMethod::Majority
    }
}

/// Final choice with provenance; `patch` is the submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub schema_version: u32,
    pub instance_id: String,
    pub method: SelectionMethod,
    /// Index into the full candidate list.
    pub selected_index: usize,
    pub candidate_id: String,
    pub patch: String,
    /// Candidates the final step chose among, as original indices.
    pub considered: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory_id: Option<String>,
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("no candidate carries a test to use as the example")]
    NoExampleTest,
    #[error(transparent)]
    Machine(#[from] MachineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Inputs for model-backed selection methods.
pub struct ModelInputs<'a> {
    pub env: MachineEnv<'a>,
    pub machine: &'a MachineConfig,
    /// Rendered codebase context for single-turn selection.
    pub context: &'a str,
    /// A previously persisted, unfinished selection trajectory to continue.
    pub resume: Option<Trajectory>,
}

fn record(
    instance: &Instance,
    method: SelectionMethod,
    candidates: &[CandidateSample],
    selected_index: usize,
    considered: Vec<usize>,
    trajectory_id: Option<String>,
    fallback: bool,
) -> SelectionRecord {
    let chosen = &candidates[selected_index];
    SelectionRecord {
        schema_version: SCHEMA_VERSION,
        instance_id: instance.instance_id.clone(),
        method,
        selected_index,
        candidate_id: chosen.candidate_id.clone(),
        patch: chosen.edit.unified_diff.clone(),
        considered,
        trajectory_id,
        fallback,
        notes: Vec::new(),
    }
}

pub fn selection_conversation(instance_id: &str, method: SelectionMethod) -> String {
    format!("{instance_id}/select/{}", method.name())
}

/// Runs one selection method. Model-backed methods also return the
/// trajectory that made the choice.
pub fn select(
    instance: &Instance,
    candidates: &[CandidateSample],
    matrix: &VoteMatrix,
    method: SelectionMethod,
    model: Option<ModelInputs<'_>>,
    sink: &mut Sink<'_>,
) -> Result<(SelectionRecord, Option<Trajectory>), SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    let all: Vec<usize> = (0..candidates.len()).collect();
    if method == SelectionMethod::Majority {
        let winner = majority_vote(matrix);
        return Ok((record(instance, method, candidates, winner, all, None, false), None));
    }
    let model = model.expect("model-backed selection needs model inputs");
    let considered = match method {
        SelectionMethod::ModelTop3 | SelectionMethod::MachineTop3 => top_k_filter(matrix, DEFAULT_TOP_K),
        _ => all,
    };
    let subset: Vec<CandidateSample> = considered.iter().map(|&i| candidates[i].clone()).collect();
    let conversation = selection_conversation(&instance.instance_id, method);
    match method {
        SelectionMethod::Model | SelectionMethod::ModelTop3 => {
            let out = model_select_single_turn(
                instance,
                &conversation,
                &subset,
                model.context,
                model.env.backend,
                model.env.retry,
                model.env.prompts,
                model.machine.temperature,
            )?;
            let mut rec = record(
                instance,
                method,
                candidates,
                considered[out.index],
                considered.clone(),
                Some(conversation),
                out.fallback,
            );
            rec.notes.extend(out.trajectory.notes.iter().cloned());
            sink(&out.trajectory)?;
            Ok((rec, Some(out.trajectory)))
        }
        _ => {
            let example = example_test(matrix, candidates).ok_or(SelectionError::NoExampleTest)?;
            run_machine_selection(instance, candidates, considered, &example, method, model, sink)
        }
    }
}

fn run_machine_selection(
    instance: &Instance,
    candidates: &[CandidateSample],
    considered: Vec<usize>,
    example: &TestScript,
    method: SelectionMethod,
    model: ModelInputs<'_>,
    sink: &mut Sink<'_>,
) -> Result<(SelectionRecord, Option<Trajectory>), SelectionError> {
    let subset: Vec<CandidateSample> = considered.iter().map(|&i| candidates[i].clone()).collect();
    let conversation = selection_conversation(&instance.instance_id, method);
    let start = model
        .resume
        .unwrap_or_else(|| Trajectory::new(&conversation, &instance.instance_id, MachineKind::Selection, model.machine.max_completions));
    let out = resume_selection_machine(instance, start, &subset, example, model.env, model.machine, sink)?;
    let mut rec = record(
        instance,
        method,
        candidates,
        considered[out.index],
        considered.clone(),
        Some(conversation),
        out.fallback,
    );
    if out.fallback {
        rec.notes.push(format!(
            "selection machine ended {:?} without choosing; picked by fallback",
            out.trajectory.terminal_status.expect("finished")
        ));
    }
    Ok((rec, Some(out.trajectory)))
}

/// Ensemble selection: the native pick plus external candidates go straight
/// to the selection machine with the native candidate's test as the example.
pub fn select_ensemble(
    instance: &Instance,
    native: &CandidateSample,
    external: &[CandidateSample],
    model: ModelInputs<'_>,
    sink: &mut Sink<'_>,
) -> Result<(SelectionRecord, Option<Trajectory>), SelectionError> {
    let example = native.test.clone().ok_or(SelectionError::NoExampleTest)?;
    let mut pool = vec![native.clone()];
    pool.extend(external.iter().cloned());
    let considered: Vec<usize> = (0..pool.len()).collect();
    run_machine_selection(instance, &pool, considered, &example, SelectionMethod::Ensemble, model, sink)
}

/// Gives a native edit its rendered diff by applying it to a fresh copy.
/// An edit that fails to apply keeps an empty diff.
pub fn render_edit(instance: &Instance, edit: &Edit, sandbox: &SandboxConfig) -> Edit {
    let mut rendered = edit.clone();
    if rendered.is_patch() {
        return rendered;
    }
    rendered.unified_diff.clear();
    if let Ok(mut ws) = materialize(&instance.codebase_ref, sandbox) {
        if apply_edit(&mut ws, &mut rendered).is_err() {
            rendered.unified_diff.clear();
        }
    }
    rendered
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    #[serde(alias = "model_patch")]
    pub patch: String,
    #[serde(default, alias = "model_name_or_path")]
    pub source_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedPrediction {
    pub file: String,
    pub instance_id: String,
    pub source_name: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleInput {
    /// External candidates per instance, in file then record order.
    pub candidates: BTreeMap<String, Vec<CandidateSample>>,
    pub dropped: Vec<DroppedPrediction>,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("{path}: record {record}: {message}")]
    Record { path: String, record: usize, message: String },
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>, IngestError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| IngestError::Read {
        path: shown.clone(),
        message: e.to_string(),
    })?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(|e| IngestError::Read {
            path: shown,
            message: e.to_string(),
        });
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Record {
                path: shown.clone(),
                record: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Reads prediction files (JSON array or JSON lines) into external
/// candidates. Patches that do not parse are dropped with a reason.
pub fn ingest_ensemble(files: &[PathBuf]) -> Result<EnsembleInput, IngestError> {
    let mut out = EnsembleInput::default();
    for path in files {
        let default_source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "external".into());
        for pred in read_predictions(path)? {
            let source = pred.source_name.clone().unwrap_or_else(|| default_source.clone());
            if let Err(e) = parse_patch(&pred.patch) {
                out.dropped.push(DroppedPrediction {
                    file: path.display().to_string(),
                    instance_id: pred.instance_id,
                    source_name: source,
                    reason: e.to_string(),
                });
                continue;
            }
            let list = out.candidates.entry(pred.instance_id.clone()).or_default();
            let n = list
                .iter()
                .filter(|c| c.source == CandidateSource::External(source.clone()))
                .count();
            list.push(CandidateSample {
                candidate_id: format!("ext-{source}-{n}"),
                instance_id: pred.instance_id,
                edit: Edit::from_patch(pred.patch),
                test: None,
                source: CandidateSource::External(source),
                trajectory_id: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;
    use crate::types::{OracleCommand, SearchReplaceBlock, SourceFilter};
    use itertools::Itertools;
    use proptest::prelude::*;

    fn cand(id: &str, diff_len: usize) -> CandidateSample {
        CandidateSample {
            candidate_id: id.into(),
            instance_id: "i".into(),
            edit: Edit::from_patch("x".repeat(diff_len)),
            test: Some(TestScript::new(format!("# test from {id}\n"))),
            source: CandidateSource::Native,
            trajectory_id: None,
        }
    }

    fn matrix_from_counts(counts: &[usize], diff_lens: &[usize]) -> (Vec<CandidateSample>, VoteMatrix) {
        let width = counts.iter().copied().max().unwrap_or(0);
        let cands: Vec<CandidateSample> = diff_lens
            .iter()
            .enumerate()
            .map(|(i, &d)| cand(&format!("c{i}"), d))
            .collect();
        let outcomes = counts
            .iter()
            .map(|&c| (0..width).map(|j| if j < c { CellOutcome::Pass } else { CellOutcome::Fail }).collect())
            .collect();
        let m = VoteMatrix::from_outcomes("i", &cands, vec!["t".into(); width], outcomes);
        (cands, m)
    }

    #[test]
    fn majority_examples() {
        let (_, m) = matrix_from_counts(&[2, 5, 3], &[10, 10, 10]);
        assert_eq!(majority_vote(&m), 1);
        assert_eq!(majority_expected_score(&[5, 5], &[true, false]), 0.5);
        let (_, m) = matrix_from_counts(&[4, 4, 1], &[120, 80, 10]);
        assert_eq!(majority_vote(&m), 1);
    }

    #[test]
    fn top_k_examples() {
        let (_, m) = matrix_from_counts(&[9, 1, 5, 5, 2], &[50, 10, 40, 30, 10]);
        assert_eq!(top_k_filter(&m, 3), vec![0, 3, 2]);
        let (_, m) = matrix_from_counts(&[1, 2], &[5, 5]);
        assert_eq!(top_k_filter(&m, 3), vec![1, 0]);
        let (_, m) = matrix_from_counts(&[3, 3, 3], &[30, 10, 20]);
        assert_eq!(top_k_filter(&m, 3), vec![1, 2, 0]);
    }

    #[test]
    fn error_cells_never_count() {
        let cands = vec![cand("a", 1)];
        let m = VoteMatrix::from_outcomes(
            "i",
            &cands,
            vec!["x".into(); 4],
            vec![vec![CellOutcome::Error, CellOutcome::Timeout, CellOutcome::Fail, CellOutcome::Pass]],
        );
        assert_eq!(m.pass_counts, vec![1]);
    }

    fn calc_fixture() -> (tempfile::TempDir, Instance) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("calc.py"), "def add(a, b):\n    return a - b\n").unwrap();
        let inst = Instance {
            instance_id: "calc".into(),
            issue_text: "add is wrong".into(),
            codebase_ref: dir.path().to_path_buf(),
            source_file_filter: SourceFilter::default(),
            gold_edit_files: None,
            oracle_eval: Some(OracleCommand { argv: vec!["true".into()] }),
        };
        (dir, inst)
    }

    fn native(id: &str, replace: &str, inst: &Instance) -> CandidateSample {
        let edit = Edit::from_blocks(vec![SearchReplaceBlock::new("calc.py", "return a - b", replace).unwrap()]);
        CandidateSample {
            candidate_id: id.into(),
            instance_id: "calc".into(),
            edit: render_edit(inst, &edit, &SandboxConfig::default()),
            test: None,
            source: CandidateSource::Native,
            trajectory_id: None,
        }
    }

    fn py_test(a: i32, b: i32) -> TestScript {
        TestScript::new(format!(
            "import sys, calc\nsys.exit(0 if calc.add({a}, {b}) == {} else 2)\n",
            a + b
        ))
    }

    #[test]
    fn vote_matrix_from_sandbox() {
        let (_d, inst) = calc_fixture();
        let sandbox = SandboxConfig::default();
        let cands = vec![
            native("a", "return a + b", &inst),
            native("b", "return a * b", &inst),
            native("c", "return a", &inst),
        ];
        let mut broken = native("d", "return a + b", &inst);
        broken.edit = Edit::from_blocks(vec![SearchReplaceBlock::new("calc.py", "nope", "x").unwrap()]);
        let mut all = cands.clone();
        all.push(broken);
        let tests = vec![
            ("t0".to_string(), py_test(2, 2)),
            ("t1".to_string(), py_test(1, 0)),
            ("t2".to_string(), py_test(3, 4)),
        ];
        let m = build_vote_matrix(&inst, &all, &tests, &sandbox, 4);
        // a+b passes all; a*b passes only 2+2; `a` passes only 1+0
        assert_eq!(m.pass_counts, vec![3, 1, 1, 0]);
        assert!(m.outcomes[3].iter().all(|c| *c == CellOutcome::Error));
        assert_eq!(m.outcomes[1][1], CellOutcome::Fail);
    }

    #[test]
    fn single_turn_selection_paths() {
        let (_d, inst) = calc_fixture();
        let cands = vec![cand("a", 30), cand("b", 10), cand("c", 20)];
        let prompts = Prompts::builtin();
        let retry = RetryPolicy::immediate(1);
        let run = |replies: &[&str]| {
            let backend = MockBackend::scripted(replies.iter().copied());
            model_select_single_turn(&inst, "calc/select/model", &cands, "", &backend, &retry, &prompts, 0.0).unwrap()
        };
        let out = run(&["```select:2\n```"]);
        assert_eq!((out.index, out.fallback, out.trajectory.completions_used), (2, false, 1));
        let out = run(&["pick two", "```select:0\n```"]);
        assert_eq!((out.index, out.fallback, out.trajectory.completions_used), (0, false, 2));
        let out = run(&["pick two", "```select:9\n```"]);
        assert_eq!((out.index, out.fallback), (1, true));
        let out = run(&[]);
        assert!(out.fallback && out.trajectory.notes[0].contains("backend failure"));
    }

    #[test]
    fn model_top3_maps_back_to_original_index() {
        let (_d, inst) = calc_fixture();
        let (cands, m) = matrix_from_counts(&[1, 7, 3, 7, 0], &[10, 40, 10, 20, 10]);
        // ranked: c3 (7, 20), c1 (7, 40), c2 (3); the model picks the second
        let backend = MockBackend::scripted(["```select:1\n```"]);
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let env = MachineEnv {
            backend: &backend,
            retry: &retry,
            sandbox: &sandbox,
            prompts: &prompts,
        };
        let machine = MachineConfig::selection();
        let model = ModelInputs {
            env,
            machine: &machine,
            context: "",
            resume: None,
        };
        let (rec, traj) = select(&inst, &cands, &m, SelectionMethod::ModelTop3, Some(model), &mut |_| Ok(())).unwrap();
        assert_eq!(rec.considered, vec![3, 1, 2]);
        assert_eq!(rec.selected_index, 1);
        assert_eq!(rec.candidate_id, "c1");
        assert!(traj.is_some());

        let (rec, _) = select(&inst, &cands, &m, SelectionMethod::Majority, None, &mut |_| Ok(())).unwrap();
        assert_eq!(rec.selected_index, 3);
    }

    #[test]
    fn machine_top3_composes() {
        let (_d, inst) = calc_fixture();
        let (cands, m) = matrix_from_counts(&[1, 7, 3, 7, 0], &[10, 40, 10, 20, 10]);
        let backend = MockBackend::scripted(["```select:2\n```"]);
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let env = MachineEnv {
            backend: &backend,
            retry: &retry,
            sandbox: &sandbox,
            prompts: &prompts,
        };
        let machine = MachineConfig::selection();
        let model = ModelInputs {
            env,
            machine: &machine,
            context: "",
            resume: None,
        };
        let (rec, traj) = select(&inst, &cands, &m, SelectionMethod::MachineTop3, Some(model), &mut |_| Ok(())).unwrap();
        assert_eq!(rec.selected_index, 2);
        // example test comes from the top-ranked candidate
        assert!(traj.unwrap().turns[0].content.contains("# test from c3"));
    }

    #[test]
    fn ingest_counts_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let patch = "--- a/calc.py\n+++ b/calc.py\n@@ -1,2 +1,2 @@\n def add(a, b):\n-    return a - b\n+    return a + b\n";
        let mut paths = Vec::new();
        for s in 0..5 {
            let p = dir.path().join(format!("sys{s}.jsonl"));
            let mut lines = vec![serde_json::json!({"instance_id": "i1", "model_patch": patch, "model_name_or_path": format!("sys{s}")}).to_string()];
            if s != 4 {
                lines.push(serde_json::json!({"instance_id": "i2", "patch": patch}).to_string());
            }
            std::fs::write(&p, lines.join("\n")).unwrap();
            paths.push(p);
        }
        let arr = dir.path().join("array.json");
        std::fs::write(
            &arr,
            serde_json::json!([{"instance_id": "i3", "patch": "garbage", "source_name": "z"}]).to_string(),
        )
        .unwrap();
        paths.push(arr);
        let got = ingest_ensemble(&paths).unwrap();
        assert_eq!(got.candidates["i1"].len(), 5);
        assert_eq!(got.candidates["i2"].len(), 4);
        assert!(!got.candidates.contains_key("i3"));
        assert_eq!(got.dropped.len(), 1);
        let sources: Vec<_> = got.candidates["i1"].iter().map(|c| c.source.clone()).collect();
        assert_eq!(sources.iter().map(|s| format!("{s:?}")).unique().count(), 5);
        assert!(got.candidates["i1"].iter().all(|c| c.edit.is_patch()));
    }

    /// Brute-force oracle: average deployment correctness over every
    /// ordering used as the tie-break among equal counts.
    fn brute_force_expected(counts: &[usize], correct: &[bool]) -> f64 {
        let n = counts.len();
        let mut hits = 0usize;
        let mut total = 0usize;
        for perm in (0..n).permutations(n) {
            let winner = perm
                .iter()
                .copied()
                .min_by_key(|&i| std::cmp::Reverse(counts[i]))
                .unwrap();
            total += 1;
            hits += correct[winner] as usize;
        }
        hits as f64 / total as f64
    }

    #[test]
    fn expected_score_matches_brute_force_on_small_matrices() {
        for n in 1..=5usize {
            for cells in 0..(1u32 << (n * n.min(5))).min(1 << 15) {
                let counts: Vec<usize> = (0..n)
                    .map(|i| (0..n).filter(|j| cells >> (i * n + j) & 1 == 1).count())
                    .collect();
                let correct: Vec<bool> = (0..n).map(|i| (cells >> i) & 1 == 0).collect();
                let a = majority_expected_score(&counts, &correct);
                let b = brute_force_expected(&counts, &correct);
                assert!((a - b).abs() < 1e-12, "{counts:?} {correct:?}");
            }
        }
    }

    fn arb_matrix() -> impl Strategy<Value = (Vec<Vec<bool>>, Vec<usize>)> {
        (1usize..8, 1usize..8).prop_flat_map(|(n, t)| {
            (
                proptest::collection::vec(proptest::collection::vec(any::<bool>(), t), n),
                proptest::collection::vec(0usize..4, n),
            )
        })
    }

    fn to_matrix(cells: &[Vec<bool>], lens: &[usize], ids: &[String]) -> (Vec<CandidateSample>, VoteMatrix) {
        let cands: Vec<CandidateSample> = ids.iter().zip(lens).map(|(id, &d)| cand(id, d)).collect();
        let outcomes = cells
            .iter()
            .map(|r| r.iter().map(|&p| if p { CellOutcome::Pass } else { CellOutcome::Fail }).collect())
            .collect();
        let width = cells.first().map_or(0, Vec::len);
        let m = VoteMatrix::from_outcomes("i", &cands, vec!["t".into(); width], outcomes);
        (cands, m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn selection_properties((cells, lens) in arb_matrix(), seed in any::<u64>(), k in 1usize..5) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ids: Vec<String> = (0..cells.len()).map(|i| format!("c{i}")).collect();
            let (_, m) = to_matrix(&cells, &lens, &ids);

            // columns permuted: same counts, same winner
            let mut cols: Vec<usize> = (0..cells[0].len()).collect();
            cols.shuffle(&mut rng);
            let shuffled: Vec<Vec<bool>> = cells.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect();
            let (_, mc) = to_matrix(&shuffled, &lens, &ids);
            prop_assert_eq!(&mc.pass_counts, &m.pass_counts);
            prop_assert_eq!(majority_vote(&mc), majority_vote(&m));

            // rows permuted: same winner identity and top-k set
            let mut rows: Vec<usize> = (0..cells.len()).collect();
            rows.shuffle(&mut rng);
            let (_, mr) = to_matrix(
                &rows.iter().map(|&i| cells[i].clone()).collect::<Vec<_>>(),
                &rows.iter().map(|&i| lens[i]).collect::<Vec<_>>(),
                &rows.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>(),
            );
            prop_assert_eq!(&mr.candidate_ids[majority_vote(&mr)], &m.candidate_ids[majority_vote(&m)]);
            let set = |mm: &VoteMatrix| top_k_filter(mm, k).into_iter().map(|i| mm.candidate_ids[i].clone()).sorted().collect::<Vec<_>>();
            prop_assert_eq!(set(&mr), set(&m));

            // winner always survives filtering
            prop_assert!(top_k_filter(&m, k).contains(&majority_vote(&m)));

            // full tie-break chain against an independent ordering
            let w = majority_vote(&m);
            for i in 0..m.len() {
                let key = |x: usize| (std::cmp::Reverse(m.pass_counts[x]), lens[x], ids[x].clone());
                prop_assert!(key(w) <= key(i));
            }
        }
    }
}
