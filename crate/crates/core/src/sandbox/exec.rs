//! Script execution with timeouts, output caps, and process-group kill.

use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{apply_edit, materialize, SandboxConfig, SandboxError, Workspace};
use crate::types::{Edit, ExecutionResult, Instance, TestScript};

const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";
const SCRIPT_NAME: &str = ".monkeys_test_script";
pub const WORKSPACE_MARK: &str = "<workspace>";
const POLL: Duration = Duration::from_millis(5);

fn truncate(bytes: Vec<u8>, total: usize, cap: usize) -> String {
    let mut text = String::from_utf8_lossy(&bytes[..bytes.len().min(cap)]).into_owned();
    if total > cap {
        text.push_str(&format!("\n[... truncated {} bytes]", total - cap));
    }
    text
}

fn drain<R: Read + Send + 'static>(mut pipe: R, cap: usize) -> thread::JoinHandle<(Vec<u8>, usize)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut total = 0usize;
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if kept.len() < cap {
                        let take = n.min(cap - kept.len());
                        kept.extend_from_slice(&buf[..take]);
                    }
                    total += n;
                }
            }
        }
        (kept, total)
    })
}

fn kill_group(pgid: u32) {
    // SAFETY: plain syscall; a negative pid targets the whole process group
    unsafe {
        libc::kill(-(pgid as i32), libc::SIGKILL);
    }
}

/// Workspace paths differ between runs; output fed back to a model must not.
fn scrub_root(text: String, root: &Path) -> String {
    let mut text = text;
    let canonical = root.canonicalize().ok();
    for r in canonical.iter().map(|p| p.as_path()).chain(std::iter::once(root)) {
        let shown = r.to_string_lossy();
        if !shown.is_empty() && text.contains(shown.as_ref()) {
            text = text.replace(shown.as_ref(), WORKSPACE_MARK);
        }
    }
    text
}

/// Runs `argv` with `cwd` as working directory in its own process group.
/// The group is killed at the timeout and whenever the leader exits.
pub fn run_command(cwd: &Path, argv: &[String], config: &SandboxConfig) -> Result<ExecutionResult, SandboxError> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| SandboxError::InterpreterNotFound(String::new()))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_else(|_| DEFAULT_PATH.into()))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);
    for var in &config.env_allowlist {
        if let Ok(value) = std::env::var(var) {
            cmd.env(var, value);
        }
    }
    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied => {
            SandboxError::InterpreterNotFound(program.clone())
        }
        _ => SandboxError::Io(e),
    })?;
    let pgid = child.id();
    let cap = config.output_cap_bytes;
    let stdout = drain(child.stdout.take().expect("piped"), cap);
    let stderr = drain(child.stderr.take().expect("piped"), cap);

    let deadline = started + config.timeout();
    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break Some(status);
        }
        if Instant::now() >= deadline {
            timed_out = true;
            kill_group(pgid);
            child.wait()?;
            break None;
        }
        thread::sleep(POLL);
    };
    // stragglers in the group would otherwise hold the pipes open
    kill_group(pgid);
    let (out, out_total) = stdout.join().unwrap_or_default();
    let (err, err_total) = stderr.join().unwrap_or_default();
    Ok(ExecutionResult {
        exit_code: if timed_out { None } else { status.and_then(|s| s.code()) },
        stdout: scrub_root(truncate(out, out_total, cap), cwd),
        stderr: scrub_root(truncate(err, err_total, cap), cwd),
        wall_time: started.elapsed().as_secs_f64(),
        timed_out,
    })
}

/// Writes `test` into the workspace and runs it with the configured interpreter.
pub fn run_script(
    ws: &mut Workspace,
    test: &TestScript,
    config: &SandboxConfig,
) -> Result<ExecutionResult, SandboxError> {
    let script_path = ws.root().join(SCRIPT_NAME);
    std::fs::write(&script_path, &test.script_text)?;
    let argv: Vec<String> = config
        .interpreter
        .iter()
        .map(|a| a.replace("{script}", SCRIPT_NAME))
        .collect();
    let result = run_command(ws.root(), &argv, config);
    let _ = std::fs::remove_file(&script_path);
    result
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evaluation {
    pub correct: bool,
    /// Why the candidate is incorrect when it never reached the oracle.
    pub reason: Option<String>,
}

/// Ground-truth check of `edit` on a fresh copy of the instance snapshot.
pub fn evaluate_candidate(
    instance: &Instance,
    edit: &Edit,
    config: &SandboxConfig,
) -> Result<Evaluation, SandboxError> {
    let oracle = instance.oracle_eval.as_ref().ok_or(SandboxError::NoOracle)?;
    let mut ws = materialize(&instance.codebase_ref, config)?;
    let mut edit = edit.clone();
    if let Err(e) = apply_edit(&mut ws, &mut edit) {
        return Ok(Evaluation {
            correct: false,
            reason: Some(e.reason().to_string()),
        });
    }
    let root = ws.root().to_string_lossy().into_owned();
    let argv: Vec<String> = oracle.argv.iter().map(|a| a.replace("{workspace}", &root)).collect();
    let result = run_command(ws.root(), &argv, config).map_err(|e| match e {
        SandboxError::InterpreterNotFound(p) => SandboxError::Evaluation(format!("oracle program `{p}` not found")),
        other => other,
    })?;
    Ok(Evaluation {
        correct: result.exit_code == Some(0),
        reason: None,
    })
}
