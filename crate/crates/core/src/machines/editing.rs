use super::{action_instructions, run_machine, trajectory_id, Driver, MachineConfig, MachineEnv, MachineError, MachineState, Sink};
use crate::prompts::Prompts;
use crate::sandbox::{apply_edit, materialize, run_script, SandboxConfig};
use crate::types::{Action, Edit, ExecutionResult, Instance, MachineKind, TestScript, TestSignal, Trajectory};

/// Writes a codebase edit against a seed test. Every feedback step runs the
/// current test on the unedited codebase and on a fresh copy with the edit
/// applied.
pub struct EditingDriver<'a> {
    instance: &'a Instance,
    context: &'a str,
    seed_test: TestScript,
}

impl<'a> EditingDriver<'a> {
    /// `context` is the rendered codebase context for the prompt.
    pub fn new(instance: &'a Instance, context: &'a str, seed_test: TestScript) -> Self {
        Self {
            instance,
            context,
            seed_test,
        }
    }

    fn run_unedited(&self, sandbox: &SandboxConfig, test: &TestScript) -> Result<ExecutionResult, MachineError> {
        let mut ws = materialize(&self.instance.codebase_ref, sandbox)?;
        Ok(run_script(&mut ws, test, sandbox)?)
    }

    /// Applies `edit` to a fresh copy and runs `test`; `Err(msg)` on apply failure.
    fn run_edited(
        &self,
        sandbox: &SandboxConfig,
        test: &TestScript,
        edit: &mut Edit,
    ) -> Result<Result<ExecutionResult, String>, MachineError> {
        let mut ws = materialize(&self.instance.codebase_ref, sandbox)?;
        if let Err(e) = apply_edit(&mut ws, edit) {
            return Ok(Err(format!("{}: {e}", e.reason())));
        }
        Ok(Ok(run_script(&mut ws, test, sandbox)?))
    }
}

impl Driver for EditingDriver<'_> {
    fn kind(&self) -> MachineKind {
        MachineKind::Editing
    }

    fn allowed(&self) -> &'static [&'static str] {
        &["write_edit", "write_test", "approve"]
    }

    fn initial_state(&self) -> MachineState {
        MachineState {
            test: Some(self.seed_test.clone()),
            ..MachineState::default()
        }
    }

    fn opening(&mut self, sandbox: &SandboxConfig, prompts: &Prompts) -> Result<String, MachineError> {
        let pre = self.run_unedited(sandbox, &self.seed_test)?;
        let actions = action_instructions(prompts, self.allowed())?;
        Ok(prompts.render(
            "editing",
            &[
                ("issue", &self.instance.issue_text),
                ("context", self.context),
                ("test", self.seed_test.script_text.trim_end()),
                ("pre_result", &pre.render()),
                ("actions", &actions),
            ],
        )?)
    }

    fn check(&self, state: &MachineState, action: &Action) -> Result<(), String> {
        if *action == Action::Approve && state.edit.is_none() {
            return Err("there is no edit to approve yet".into());
        }
        Ok(())
    }

    fn step(
        &mut self,
        sandbox: &SandboxConfig,
        prompts: &Prompts,
        state: &mut MachineState,
        action: &Action,
    ) -> Result<String, MachineError> {
        match action {
            Action::WriteEdit(edit) => state.edit = Some(edit.clone()),
            Action::WriteTest(test) => state.test = Some(test.clone()),
            _ => unreachable!("only write actions reach step"),
        }
        let test = state.test.clone().expect("editing machine always holds a test");
        let pre = self.run_unedited(sandbox, &test)?;
        let mut edit = state.edit.clone().unwrap_or_default();
        match self.run_edited(sandbox, &test, &mut edit)? {
            Ok(post) => {
                if state.edit.is_some() {
                    // keep the rendered diff on the snapshot
                    state.edit = Some(edit);
                }
                Ok(prompts.render(
                    "editing_feedback",
                    &[("pre_result", &pre.render()), ("post_result", &post.render())],
                )?)
            }
            Err(error) => Ok(prompts.render(
                "editing_apply_error",
                &[("error", &error), ("pre_result", &pre.render())],
            )?),
        }
    }

    fn approval_note(&self, sandbox: &SandboxConfig, state: &MachineState) -> Result<Option<String>, MachineError> {
        let test = state.test.clone().expect("editing machine always holds a test");
        let pre = self.run_unedited(sandbox, &test)?.signal();
        let mut edit = state.edit.clone().unwrap_or_default();
        let post = match self.run_edited(sandbox, &test, &mut edit)? {
            Ok(r) => Some(r.signal()),
            Err(_) => None,
        };
        Ok(match (pre, post) {
            (TestSignal::IssuePresent, Some(TestSignal::Fixed)) => None,
            (pre, Some(post)) => Some(format!(
                "approved without a two-sided pass: test is {pre:?} before the edit and {post:?} after"
            )),
            (_, None) => Some("approved an edit that does not apply".into()),
        })
    }
}

pub fn run_editing_machine(
    instance: &Instance,
    index: usize,
    context: &str,
    seed_test: TestScript,
    env: MachineEnv<'_>,
    config: &MachineConfig,
    sink: &mut Sink<'_>,
) -> Result<Trajectory, MachineError> {
    let traj = Trajectory::new(
        trajectory_id(&instance.instance_id, MachineKind::Editing, index),
        &instance.instance_id,
        MachineKind::Editing,
        config.max_completions,
    );
    run_machine(&mut EditingDriver::new(instance, context, seed_test), traj, env, config, sink)
}
