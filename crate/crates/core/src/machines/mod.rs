//! Feedback-loop state machines: the generic engine plus the testing,
//! editing and selection drivers.
//!
//! A machine sends the conversation so far, parses one action from the
//! reply, executes it in the sandbox and appends the result as the next user
//! message. It stops on approve/select or when the completion budget is
//! spent. A malformed reply gets one correction prompt; a second malformed
//! reply in a row ends the machine.

mod action;
mod editing;
mod selection;
mod testing;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{complete, ChatBackend, ChatMessage, ChatRequest, LlmError, RetryPolicy};
use crate::prompts::{PromptError, Prompts};
use crate::sandbox::{SandboxConfig, SandboxError};
use crate::types::{Action, Edit, IterationSnapshot, MachineKind, Role, TerminalStatus, TestScript, Trajectory, Turn};

pub use action::{parse_action, render_action};
pub use editing::{run_editing_machine, EditingDriver};
pub use selection::{
    fallback_choice, render_candidates, resume_selection_machine, run_selection_machine, SelectionDriver, SelectionOutcome,
};
pub use testing::{run_testing_machine, TestingDriver};

pub const DEFAULT_GENERATION_COMPLETIONS: usize = 8;
pub const DEFAULT_SELECTION_COMPLETIONS: usize = 10;
pub const DEFAULT_GENERATION_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub max_completions: usize,
    pub temperature: f64,
    pub timeout_s: f64,
}

impl MachineConfig {
    pub fn generation() -> Self {
        Self {
            max_completions: DEFAULT_GENERATION_COMPLETIONS,
            temperature: DEFAULT_GENERATION_TEMPERATURE,
            timeout_s: crate::sandbox::DEFAULT_TIMEOUT_S,
        }
    }

    pub fn selection() -> Self {
        Self {
            max_completions: DEFAULT_SELECTION_COMPLETIONS,
            temperature: 0.0,
            timeout_s: crate::sandbox::DEFAULT_TIMEOUT_S,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_completions < 1 {
            return Err("max_completions must be at least 1".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.timeout_s.is_nan() || self.timeout_s <= 0.0 {
            return Err("timeout_s must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum MachineError {
    #[error("backend failure in {trajectory}: {source}")]
    Backend {
        trajectory: String,
        #[source]
        source: LlmError,
    },
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid machine input: {0}")]
    InvalidInput(String),
    #[error("cannot persist trajectory: {0}")]
    Persist(String),
}

/// Shared services for a machine run.
#[derive(Clone, Copy)]
pub struct MachineEnv<'a> {
    pub backend: &'a dyn ChatBackend,
    pub retry: &'a RetryPolicy,
    pub sandbox: &'a SandboxConfig,
    pub prompts: &'a Prompts,
}

/// Mutable artifacts a machine carries between iterations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MachineState {
    pub test: Option<TestScript>,
    pub edit: Option<Edit>,
    pub selection: Option<usize>,
    pub votes: Option<Vec<usize>>,
}

impl MachineState {
    fn snapshot(&self, completion: usize, malformed: bool) -> IterationSnapshot {
        IterationSnapshot {
            completion,
            test: self.test.clone(),
            edit: self.edit.clone(),
            selection: self.selection,
            malformed,
            votes: self.votes.clone(),
        }
    }

    fn from_snapshot(s: &IterationSnapshot) -> Self {
        Self {
            test: s.test.clone(),
            edit: s.edit.clone(),
            selection: s.selection,
            votes: s.votes.clone(),
        }
    }
}

/// One concrete machine: its prompts, permissions and feedback step.
pub trait Driver {
    fn kind(&self) -> MachineKind;

    /// Action names this machine accepts, as in [`Action::name`].
    fn allowed(&self) -> &'static [&'static str];

    fn initial_state(&self) -> MachineState;

    /// Opening user prompt.
    fn opening(&mut self, sandbox: &SandboxConfig, prompts: &Prompts) -> Result<String, MachineError>;

    /// Machine-specific checks beyond the permission matrix; `Err` is a
    /// correction message and makes the reply malformed.
    fn check(&self, state: &MachineState, action: &Action) -> Result<(), String>;

    /// Executes a write action, updates `state`, and returns the feedback message.
    fn step(
        &mut self,
        sandbox: &SandboxConfig,
        prompts: &Prompts,
        state: &mut MachineState,
        action: &Action,
    ) -> Result<String, MachineError>;

    /// Note recorded on the trajectory when the model approves.
    fn approval_note(&self, _sandbox: &SandboxConfig, _state: &MachineState) -> Result<Option<String>, MachineError> {
        Ok(None)
    }
}

fn allowed_text(allowed: &[&str]) -> String {
    allowed
        .iter()
        .map(|a| match *a {
            "write_test" => "- test: write or rewrite the test script",
            "write_edit" => "- edit: write or rewrite the codebase edit",
            "approve" => "- approve: accept the current artifacts and finish",
            "select" => "- select:N: choose candidate N and finish",
            _ => "",
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Action instructions for a machine prompt.
pub fn action_instructions(prompts: &Prompts, allowed: &[&str]) -> Result<String, PromptError> {
    prompts.render("actions", &[("allowed", &allowed_text(allowed))])
}

/// Called after every completed iteration with the trajectory so far.
pub type Sink<'a> = dyn FnMut(&Trajectory) -> Result<(), MachineError> + 'a;

fn trailing_malformed(traj: &Trajectory) -> usize {
    traj.iteration_snapshots
        .iter()
        .rev()
        .take_while(|s| s.malformed)
        .count()
}

/// Runs `driver` to completion, starting from `traj` (fresh or partially
/// persisted). Backend failures leave the last persisted iteration intact.
pub fn run_machine(
    driver: &mut dyn Driver,
    mut traj: Trajectory,
    env: MachineEnv<'_>,
    config: &MachineConfig,
    sink: &mut Sink<'_>,
) -> Result<Trajectory, MachineError> {
    config.validate().map_err(MachineError::InvalidInput)?;
    if traj.is_finished() {
        return Ok(traj);
    }
    let mut sandbox = env.sandbox.clone();
    sandbox.timeout_s = config.timeout_s;
    traj.max_completions = config.max_completions;
    if traj.turns.is_empty() {
        let prompt = driver.opening(&sandbox, env.prompts)?;
        traj.turns.push(Turn::user(prompt));
        sink(&traj)?;
    }
    let mut state = traj
        .final_snapshot()
        .map(MachineState::from_snapshot)
        .unwrap_or_else(|| driver.initial_state());
    let mut malformed_run = trailing_malformed(&traj);
    let actions = action_instructions(env.prompts, driver.allowed())?;

    while traj.completions_used < config.max_completions {
        let messages = traj
            .turns
            .iter()
            .map(|t| ChatMessage::new(t.role, t.content.clone()))
            .collect();
        let request = ChatRequest::new(traj.trajectory_id.clone(), messages, config.temperature).with_cache_prefix(1);
        let done = complete(&request, env.backend, env.retry).map_err(|source| MachineError::Backend {
            trajectory: traj.trajectory_id.clone(),
            source,
        })?;
        traj.completions_used += 1;
        let n = traj.completions_used;
        let parsed = parse_action(&done.text).and_then(|action| {
            if !driver.allowed().contains(&action.name()) {
                return Err(format!("`{}` is not available here", action.name()));
            }
            driver.check(&state, &action)?;
            Ok(action)
        });
        let mut turn = Turn {
            role: Role::Assistant,
            content: done.text,
            usage: done.usage,
            parsed_action: None,
        };
        match parsed {
            Err(reason) => {
                malformed_run += 1;
                traj.turns.push(turn);
                traj.iteration_snapshots.push(state.snapshot(n, true));
                if malformed_run >= 2 {
                    traj.terminal_status = Some(TerminalStatus::MalformedFailure);
                    sink(&traj)?;
                    return Ok(traj);
                }
                let correction = env
                    .prompts
                    .render("correction", &[("reason", &reason), ("actions", &actions)])?;
                traj.turns.push(Turn::user(correction));
            }
            Ok(action) => {
                malformed_run = 0;
                turn.parsed_action = Some(action.clone());
                traj.turns.push(turn);
                match action {
                    Action::Approve => {
                        if let Some(note) = driver.approval_note(&sandbox, &state)? {
                            traj.notes.push(note);
                        }
                        traj.iteration_snapshots.push(state.snapshot(n, false));
                        traj.terminal_status = Some(TerminalStatus::Approved);
                        sink(&traj)?;
                        return Ok(traj);
                    }
                    Action::Select(i) => {
                        state.selection = Some(i);
                        traj.iteration_snapshots.push(state.snapshot(n, false));
                        traj.terminal_status = Some(TerminalStatus::Selected);
                        sink(&traj)?;
                        return Ok(traj);
                    }
                    write => {
                        let feedback = driver.step(&sandbox, env.prompts, &mut state, &write)?;
                        traj.turns.push(Turn::user(feedback));
                        traj.iteration_snapshots.push(state.snapshot(n, false));
                    }
                }
            }
        }
        sink(&traj)?;
    }
    traj.terminal_status = Some(TerminalStatus::Exhausted);
    sink(&traj)?;
    Ok(traj)
}

/// Trajectory ids double as backend conversation keys.
pub fn trajectory_id(instance_id: &str, kind: MachineKind, index: usize) -> String {
    let kind = match kind {
        MachineKind::Testing => "testing",
        MachineKind::Editing => "editing",
        MachineKind::Selection => "selection",
    };
    format!("{instance_id}/{kind}/{index:02}")
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use crate::llm::MockBackend;

    fn env<'a>(backend: &'a MockBackend, retry: &'a RetryPolicy, sandbox: &'a SandboxConfig, prompts: &'a Prompts) -> MachineEnv<'a> {
        MachineEnv {
            backend,
            retry,
            sandbox,
            prompts,
        }
    }

    #[test]
    fn malformed_counts_against_budget() {
        let (_d, inst) = fixture();
        let backend = MockBackend::scripted(["no action here", GOOD_TEST, APPROVE]);
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let traj = run_testing_machine(&inst, 0, env(&backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |_| Ok(())).unwrap();
        assert_eq!(traj.completions_used, 3);
        assert_eq!(traj.terminal_status, Some(TerminalStatus::Approved));
        assert!(traj.iteration_snapshots[0].malformed);
        assert!(traj.turns[2].content.contains("not a valid action"));
    }

    #[test]
    fn two_malformed_in_a_row_fail() {
        let (_d, inst) = fixture();
        let backend = MockBackend::scripted(["nope", "```edit\nx\n```", APPROVE]);
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let traj = run_testing_machine(&inst, 0, env(&backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |_| Ok(())).unwrap();
        assert_eq!(traj.terminal_status, Some(TerminalStatus::MalformedFailure));
        assert_eq!(traj.completions_used, 2);
    }

    #[test]
    fn testing_machine_cannot_edit() {
        let (_d, inst) = fixture();
        let backend = MockBackend::scripted([FIX, GOOD_TEST, APPROVE]);
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let traj = run_testing_machine(&inst, 0, env(&backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |_| Ok(())).unwrap();
        assert!(traj.iteration_snapshots[0].malformed);
        assert!(traj.turns[2].content.contains("`write_edit` is not available"));
        assert!(traj.final_edit().is_none());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (_d, inst) = fixture();
        let replies = [PASSING_TEST, "garbage", GOOD_TEST, APPROVE];
        let (retry, sandbox, prompts) = (RetryPolicy::immediate(1), SandboxConfig::default(), Prompts::builtin());
        let full_backend = MockBackend::scripted(replies);
        let full = run_testing_machine(&inst, 0, env(&full_backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |_| Ok(())).unwrap();

        for cut in 1..=4 {
            let mut saved: Vec<Trajectory> = Vec::new();
            let backend = MockBackend::scripted(replies);
            let _ = run_testing_machine(&inst, 0, env(&backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |t| {
                saved.push(t.clone());
                if saved.len() > cut {
                    Err(MachineError::Persist("simulated crash".into()))
                } else {
                    Ok(())
                }
            });
            let partial = saved[cut - 1].clone();
            let mut driver = TestingDriver::new(&inst);
            let resumed = run_machine(&mut driver, partial, env(&backend, &retry, &sandbox, &prompts), &MachineConfig::generation(), &mut |_| Ok(())).unwrap();
            assert_eq!(
                serde_json::to_string(&resumed).unwrap(),
                serde_json::to_string(&full).unwrap(),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn config_defaults() {
        let g = MachineConfig::generation();
        assert_eq!((g.max_completions, g.temperature, g.timeout_s), (8, 0.5, 100.0));
        let s = MachineConfig::selection();
        assert_eq!((s.max_completions, s.temperature), (10, 0.0));
        assert!(MachineConfig { max_completions: 0, ..g }.validate().is_err());
        assert_eq!(trajectory_id("x", MachineKind::Editing, 3), "x/editing/03");
    }
}
