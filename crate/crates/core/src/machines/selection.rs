use std::collections::BTreeSet;

use super::{action_instructions, run_machine, Driver, MachineConfig, MachineEnv, MachineError, MachineState, Sink};
use crate::prompts::Prompts;
use crate::sandbox::{apply_edit, materialize, run_script, SandboxConfig};
use crate::types::{Action, CandidateSample, Instance, MachineKind, TerminalStatus, TestScript, TestSignal, Trajectory};

/// Chooses among candidate edits, optionally writing tests that run on the
/// unedited codebase and on every candidate.
pub struct SelectionDriver<'a> {
    instance: &'a Instance,
    candidates: &'a [CandidateSample],
    example_test: &'a TestScript,
}

impl<'a> SelectionDriver<'a> {
    pub fn new(instance: &'a Instance, candidates: &'a [CandidateSample], example_test: &'a TestScript) -> Self {
        Self {
            instance,
            candidates,
            example_test,
        }
    }

    fn touched_file_contents(&self) -> String {
        let files: BTreeSet<String> = self
            .candidates
            .iter()
            .flat_map(|c| c.edit.touched_files())
            .collect();
        files
            .into_iter()
            .filter_map(|rel| {
                let text = std::fs::read_to_string(self.instance.codebase_ref.join(&rel)).ok()?;
                Some(format!("<file path=\"{rel}\">\n{}</file>", text.replace("\r\n", "\n")))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Candidates numbered from 0, each as its unified diff.
pub fn render_candidates(candidates: &[CandidateSample]) -> String {
    candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("<candidate number=\"{i}\">\n{}</candidate>", c.edit.unified_diff))
        .collect::<Vec<_>>()
        .join("\n")
}

impl Driver for SelectionDriver<'_> {
    fn kind(&self) -> MachineKind {
        MachineKind::Selection
    }

    fn allowed(&self) -> &'static [&'static str] {
        &["write_test", "select"]
    }

    fn initial_state(&self) -> MachineState {
        MachineState {
            votes: Some(vec![0; self.candidates.len()]),
            ..MachineState::default()
        }
    }

    fn opening(&mut self, _sandbox: &SandboxConfig, prompts: &Prompts) -> Result<String, MachineError> {
        let actions = action_instructions(prompts, self.allowed())?;
        Ok(prompts.render(
            "selection",
            &[
                ("issue", &self.instance.issue_text),
                ("files", &self.touched_file_contents()),
                ("candidates", &render_candidates(self.candidates)),
                ("test", self.example_test.script_text.trim_end()),
                ("actions", &actions),
            ],
        )?)
    }

    fn check(&self, _state: &MachineState, action: &Action) -> Result<(), String> {
        match action {
            Action::Select(i) if *i >= self.candidates.len() => Err(format!(
                "candidate {i} does not exist; choose 0 to {}",
                self.candidates.len() - 1
            )),
            _ => Ok(()),
        }
    }

    fn step(
        &mut self,
        sandbox: &SandboxConfig,
        prompts: &Prompts,
        state: &mut MachineState,
        action: &Action,
    ) -> Result<String, MachineError> {
        let Action::WriteTest(test) = action else {
            unreachable!("permission matrix admits only write_test here");
        };
        state.test = Some(test.clone());
        let mut ws = materialize(&self.instance.codebase_ref, sandbox)?;
        let original = run_script(&mut ws, test, sandbox)?;
        let votes = state.votes.get_or_insert_with(|| vec![0; self.candidates.len()]);
        let mut sections = Vec::with_capacity(self.candidates.len());
        for (i, cand) in self.candidates.iter().enumerate() {
            let mut ws = materialize(&self.instance.codebase_ref, sandbox)?;
            let mut edit = cand.edit.clone();
            let body = match apply_edit(&mut ws, &mut edit) {
                Ok(_) => {
                    let r = run_script(&mut ws, test, sandbox)?;
                    if r.signal() == TestSignal::Fixed {
                        votes[i] += 1;
                    }
                    r.render()
                }
                Err(e) => format!("edit could not be applied: {e}"),
            };
            sections.push(format!("Test output with candidate {i} applied:\n\n{body}"));
        }
        Ok(prompts.render(
            "selection_feedback",
            &[("original", &original.render()), ("results", &sections.join("\n\n"))],
        )?)
    }
}

/// Most selection-machine tests passed, then shorter diff, then candidate id.
pub fn fallback_choice(candidates: &[CandidateSample], votes: &[usize]) -> usize {
    (0..candidates.len())
        .min_by(|&a, &b| {
            let va = votes.get(a).copied().unwrap_or(0);
            let vb = votes.get(b).copied().unwrap_or(0);
            vb.cmp(&va)
                .then_with(|| candidates[a].tie_break_key().cmp(&candidates[b].tie_break_key()))
        })
        .expect("at least one candidate")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub index: usize,
    /// True when the machine ended without choosing and the fallback rule picked.
    pub fallback: bool,
    pub trajectory: Trajectory,
}

impl SelectionOutcome {
    pub fn from_trajectory(trajectory: Trajectory, candidates: &[CandidateSample]) -> Self {
        let last = trajectory.final_snapshot();
        match (trajectory.terminal_status, last.and_then(|s| s.selection)) {
            (Some(TerminalStatus::Selected), Some(index)) => Self {
                index,
                fallback: false,
                trajectory,
            },
            _ => {
                let votes = last.and_then(|s| s.votes.clone()).unwrap_or_default();
                Self {
                    index: fallback_choice(candidates, &votes),
                    fallback: true,
                    trajectory,
                }
            }
        }
    }
}

pub fn run_selection_machine(
    instance: &Instance,
    trajectory_id: &str,
    candidates: &[CandidateSample],
    example_test: &TestScript,
    env: MachineEnv<'_>,
    config: &MachineConfig,
    sink: &mut Sink<'_>,
) -> Result<SelectionOutcome, MachineError> {
    resume_selection_machine(
        instance,
        Trajectory::new(trajectory_id, &instance.instance_id, MachineKind::Selection, config.max_completions),
        candidates,
        example_test,
        env,
        config,
        sink,
    )
}

/// Continues a persisted selection trajectory (or starts a fresh one).
pub fn resume_selection_machine(
    instance: &Instance,
    trajectory: Trajectory,
    candidates: &[CandidateSample],
    example_test: &TestScript,
    env: MachineEnv<'_>,
    config: &MachineConfig,
    sink: &mut Sink<'_>,
) -> Result<SelectionOutcome, MachineError> {
    if candidates.is_empty() {
        return Err(MachineError::InvalidInput("selection needs at least one candidate".into()));
    }
    let mut driver = SelectionDriver::new(instance, candidates, example_test);
    let traj = run_machine(&mut driver, trajectory, env, config, sink)?;
    Ok(SelectionOutcome::from_trajectory(traj, candidates))
}
