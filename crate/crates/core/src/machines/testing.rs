use super::{action_instructions, run_machine, trajectory_id, Driver, MachineConfig, MachineEnv, MachineError, MachineState, Sink};
use crate::prompts::Prompts;
use crate::sandbox::{materialize, run_script, SandboxConfig};
use crate::types::{Action, Instance, MachineKind, Trajectory};

/// Writes a reproduction test and sees it run on the unedited codebase.
/// Codebase context is left out of the prompt on purpose.
pub struct TestingDriver<'a> {
    instance: &'a Instance,
}

impl<'a> TestingDriver<'a> {
    pub fn new(instance: &'a Instance) -> Self {
        Self { instance }
    }
}

impl Driver for TestingDriver<'_> {
    fn kind(&self) -> MachineKind {
        MachineKind::Testing
    }

    fn allowed(&self) -> &'static [&'static str] {
        &["write_test", "approve"]
    }

    fn initial_state(&self) -> MachineState {
        MachineState::default()
    }

    fn opening(&mut self, _sandbox: &SandboxConfig, prompts: &Prompts) -> Result<String, MachineError> {
        let actions = action_instructions(prompts, self.allowed())?;
        Ok(prompts.render("testing", &[("issue", &self.instance.issue_text), ("actions", &actions)])?)
    }

    fn check(&self, state: &MachineState, action: &Action) -> Result<(), String> {
        if *action == Action::Approve && state.test.is_none() {
            return Err("there is no test to approve yet".into());
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
        let Action::WriteTest(test) = action else {
            unreachable!("permission matrix admits only write_test here");
        };
        state.test = Some(test.clone());
        let mut ws = materialize(&self.instance.codebase_ref, sandbox)?;
        let result = run_script(&mut ws, test, sandbox)?;
        Ok(prompts.render("testing_feedback", &[("result", &result.render())])?)
    }
}

pub fn run_testing_machine(
    instance: &Instance,
    index: usize,
    env: MachineEnv<'_>,
    config: &MachineConfig,
    sink: &mut Sink<'_>,
) -> Result<Trajectory, MachineError> {
    let traj = Trajectory::new(
        trajectory_id(&instance.instance_id, MachineKind::Testing, index),
        &instance.instance_id,
        MachineKind::Testing,
        config.max_completions,
    );
    run_machine(&mut TestingDriver::new(instance), traj, env, config, sink)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::llm::{MockBackend, RetryPolicy};
    use crate::types::TerminalStatus;

    fn run(inst: &Instance, replies: &[&str], config: MachineConfig, sandbox: SandboxConfig) -> Trajectory {
        let backend = MockBackend::scripted(replies.iter().copied());
        let env = MachineEnv {
            backend: &backend,
            retry: &RetryPolicy::immediate(1),
            sandbox: &sandbox,
            prompts: &Prompts::builtin(),
        };
        run_testing_machine(inst, 0, env, &config, &mut |_| Ok(())).unwrap()
    }

    #[test]
    fn happy_path() {
        let (_d, inst) = fixture();
        let t = run(&inst, &[GOOD_TEST, APPROVE], MachineConfig::generation(), SandboxConfig::default());
        assert_eq!(t.terminal_status, Some(TerminalStatus::Approved));
        assert_eq!(t.completions_used, 2);
        assert!(t.turns[2].content.contains("exit code 2"), "{}", t.turns[2].content);
        assert!(t.final_test().unwrap().script_text.contains("calc.add"));
        assert!(!t.turns[0].content.contains("return a - b"));
    }

    #[test]
    fn revision_after_exit_zero() {
        let (_d, inst) = fixture();
        let t = run(&inst, &[PASSING_TEST, GOOD_TEST, APPROVE], MachineConfig::generation(), SandboxConfig::default());
        assert!(t.turns[2].content.contains("exit code 0"));
        assert_eq!(t.completions_used, 3);
        assert_eq!(t.iteration_snapshots.len(), 3);
    }

    #[test]
    fn timeout_is_reported() {
        let (_d, inst) = fixture();
        let config = MachineConfig {
            timeout_s: 0.3,
            ..MachineConfig::generation()
        };
        let sleepy = "```test\nimport time\ntime.sleep(30)\n```";
        let t = run(&inst, &[sleepy, APPROVE], config, SandboxConfig::default());
        assert!(t.turns[2].content.contains("TIMED OUT"), "{}", t.turns[2].content);
    }

    #[test]
    fn exhaustion_keeps_last_snapshot() {
        let (_d, inst) = fixture();
        let replies: Vec<String> = (0..8)
            .map(|i| format!("```test\nimport sys\n# v{i}\nsys.exit(2)\n```"))
            .collect();
        let refs: Vec<&str> = replies.iter().map(String::as_str).collect();
        let t = run(&inst, &refs, MachineConfig::generation(), SandboxConfig::default());
        assert_eq!(t.terminal_status, Some(TerminalStatus::Exhausted));
        assert_eq!(t.completions_used, 8);
        assert!(t.final_test().unwrap().script_text.contains("# v7"));
    }

    #[test]
    fn approve_without_test_is_malformed() {
        let (_d, inst) = fixture();
        let t = run(&inst, &[APPROVE, GOOD_TEST, APPROVE], MachineConfig::generation(), SandboxConfig::default());
        assert!(t.iteration_snapshots[0].malformed);
        assert_eq!(t.terminal_status, Some(TerminalStatus::Approved));
    }
}
