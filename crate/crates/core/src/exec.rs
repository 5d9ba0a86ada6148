//! Sandboxed execution of candidate code against a test suite.
//!
//! The orchestrator never runs corpus-language code itself. It writes the
//! code and tests into a fresh directory and launches a runner that speaks
//! this protocol:
//!
//! ```text
//! <runner> --code <file> --tests <file> --json <out>
//! ```
//!
//! The runner writes one JSON document to `<out>`:
//! `{"outcomes": [{"group", "case", "status", "exception_type", "traceback", "duration_s"}],
//!   "collection_error": {"exception_type", "traceback"} | null}`
//! and exits 0 whenever that document was written, regardless of test
//! failures. A nonzero exit is a runner fault.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::sync::LazyLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskSpec;
use crate::process::{RunRecord, RunStatus};
use crate::pysrc;

pub const DEFAULT_TIMEOUT_S: f64 = 480.0;
/// Extra time allowed past the deadline for killing and reaping the runner.
pub const GRACE_S: f64 = 5.0;
pub const TIME_LIMIT_EXCEEDED: &str = "Time Limit Exceeded";
pub const STDERR_LIMIT: usize = 64 * 1024;

pub const CODE_FILE: &str = "candidate.py";
pub const TESTS_FILE: &str = "test_candidate.py";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("invalid execution request: {0}")]
    InvalidRequest(String),
    #[error("sandbox setup failed: {0}")]
    SandboxSetup(String),
    #[error("runner protocol violation: {0}")]
    RunnerProtocol(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TestStatus {
    #[serde(alias = "pass", alias = "PASS")]
    Pass,
    #[serde(alias = "fail", alias = "FAIL")]
    Fail,
    #[serde(alias = "error", alias = "ERROR")]
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub group: String,
    pub case: String,
    pub status: TestStatus,
    #[serde(default)]
    pub exception_type: Option<String>,
    #[serde(default)]
    pub traceback: String,
    #[serde(default)]
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionError {
    pub exception_type: String,
    #[serde(default)]
    pub traceback: String,
}

/// The document a runner writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerReport {
    pub outcomes: Vec<TestOutcome>,
    #[serde(default)]
    pub collection_error: Option<CollectionError>,
    /// Skipped or expected-failure cases; reported but excluded from metrics.
    #[serde(default)]
    pub skipped: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRequest {
    pub code: String,
    pub tests: String,
    pub timeout_s: f64,
    /// Leave the sandbox directory on disk after the run.
    #[serde(default)]
    pub keep_sandbox: bool,
}

impl ExecutionRequest {
    pub fn new(code: impl Into<String>, tests: impl Into<String>) -> Self {
        Self { code: code.into(), tests: tests.into(), timeout_s: DEFAULT_TIMEOUT_S, keep_sandbox: false }
    }

    pub fn with_timeout(mut self, timeout_s: f64) -> Self {
        self.timeout_s = timeout_s;
        self
    }

    pub fn keep_sandbox(mut self, keep: bool) -> Self {
        self.keep_sandbox = keep;
        self
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(ExecError::InvalidRequest(format!("timeout_s must be > 0, got {}", self.timeout_s)));
        }
        if self.code.trim().is_empty() {
            return Err(ExecError::InvalidRequest("code is empty".into()));
        }
        if self.tests.trim().is_empty() {
            return Err(ExecError::InvalidRequest("tests are empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub per_test: Vec<TestOutcome>,
    pub timed_out: bool,
    pub wall_time_s: f64,
    /// `None` when the runner was killed.
    pub runner_exit_code: Option<i32>,
    pub raw_stderr: String,
    #[serde(default)]
    pub collection_error: Option<CollectionError>,
    /// Set to [`TIME_LIMIT_EXCEEDED`] on timeout.
    #[serde(default)]
    pub synthetic_error: Option<String>,
    #[serde(default)]
    pub skipped: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sandbox: Option<PathBuf>,
}

impl ExecutionResult {
    /// Every outcome passed, nothing failed to collect and the run finished in time.
    pub fn all_passed(&self) -> bool {
        !self.timed_out
            && self.collection_error.is_none()
            && !self.per_test.is_empty()
            && self.per_test.iter().all(|o| o.status == TestStatus::Pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TestOutcome> {
        self.per_test.iter().filter(|o| o.status != TestStatus::Pass)
    }

    /// Distinct error identifiers: outcome exceptions, the collection error
    /// and the synthetic timeout error.
    pub fn error_types(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> =
            self.per_test.iter().filter_map(|o| o.exception_type.clone()).collect();
        if let Some(c) = &self.collection_error {
            out.insert(c.exception_type.clone());
        }
        if let Some(s) = &self.synthetic_error {
            out.insert(s.clone());
        }
        out
    }

    /// Status per (group, case).
    pub fn status_map(&self) -> BTreeMap<(String, String), TestStatus> {
        self.per_test.iter().map(|o| ((o.group.clone(), o.case.clone()), o.status)).collect()
    }
}

/// How to launch a runner: a program plus leading arguments placed before
/// the protocol flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunnerHandle {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

impl RunnerHandle {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        Self { program: program.into(), args: Vec::new() }
    }

    pub fn with_args<I, S>(mut self, args: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.args.extend(args.into_iter().map(Into::into));
        self
    }

    /// Splits a whitespace-separated command line such as `python3 runner.py`.
    pub fn parse(command: &str) -> Result<Self, ExecError> {
        let mut parts = command.split_whitespace();
        let program = parts.next().ok_or_else(|| ExecError::InvalidRequest("empty runner command".into()))?;
        Ok(Self::new(program).with_args(parts))
    }

    /// Anchors a relative program path (one with a directory part, such as
    /// `./run.sh`) and relative arguments naming existing files at `dir`.
    /// Runners are launched from inside the sandbox, so such paths would not
    /// resolve otherwise.
    pub fn resolve_in(mut self, dir: &Path) -> Self {
        let local = dir.join(&self.program);
        if self.program.is_relative() && self.program.components().count() > 1 && local.is_file() {
            self.program = local;
        }
        for a in &mut self.args {
            let p = dir.join(&*a);
            if Path::new(a.as_str()).is_relative() && p.is_file() {
                *a = p.display().to_string();
            }
        }
        self
    }
}

static EXCEPTION_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)(?::|$)").unwrap());

/// Qualified class name of the final exception in a Python-style traceback,
/// with `builtins.` stripped.
pub fn exception_from_traceback(traceback: &str) -> Option<String> {
    let line = traceback
        .lines()
        .rev()
        .find(|l| !l.trim().is_empty() && !l.starts_with(' ') && !l.starts_with('\t'))?;
    let name = EXCEPTION_LINE.captures(line.trim_end())?.get(1)?.as_str();
    if name == "Traceback" || name == "During" {
        return None;
    }
    Some(normalize_exception(name))
}

pub fn normalize_exception(name: &str) -> String {
    name.strip_prefix("builtins.").unwrap_or(name).to_string()
}

fn protocol(msg: impl Into<String>) -> ExecError {
    ExecError::RunnerProtocol(msg.into())
}

/// Checks a runner report against the protocol and the suite, filling in
/// exception types the runner left out but the traceback names.
pub fn validate_report(mut report: RunnerReport, tests: &str) -> Result<RunnerReport, ExecError> {
    let groups = pysrc::test_groups(tests);
    let known: BTreeSet<(&str, &str)> = groups
        .iter()
        .flat_map(|g| g.cases.iter().map(move |c| (g.name.as_str(), c.as_str())))
        .collect();
    for o in &mut report.outcomes {
        if o.group.is_empty() || o.case.is_empty() {
            return Err(protocol("outcome without group or case name"));
        }
        if !known.is_empty() && !known.contains(&(o.group.as_str(), o.case.as_str())) {
            return Err(protocol(format!("outcome {}.{} does not name a test in the suite", o.group, o.case)));
        }
        if !(o.duration_s.is_finite() && o.duration_s >= 0.0) {
            return Err(protocol(format!("outcome {}.{} has invalid duration", o.group, o.case)));
        }
        match o.status {
            TestStatus::Pass => {
                if o.exception_type.is_some() {
                    return Err(protocol(format!("passing outcome {}.{} carries an exception", o.group, o.case)));
                }
            }
            TestStatus::Fail | TestStatus::Error => {
                if o.traceback.trim().is_empty() {
                    return Err(protocol(format!("failing outcome {}.{} has no traceback", o.group, o.case)));
                }
                o.exception_type = match o.exception_type.take().filter(|e| !e.trim().is_empty()) {
                    Some(e) => Some(normalize_exception(e.trim())),
                    None => Some(exception_from_traceback(&o.traceback).ok_or_else(|| {
                        protocol(format!("cannot identify the exception of {}.{}", o.group, o.case))
                    })?),
                };
            }
        }
    }
    if let Some(c) = &mut report.collection_error {
        if c.exception_type.trim().is_empty() {
            c.exception_type = exception_from_traceback(&c.traceback)
                .ok_or_else(|| protocol("collection_error without exception_type"))?;
        } else {
            c.exception_type = normalize_exception(c.exception_type.trim());
        }
    }
    Ok(report)
}

fn minimal_env(cmd: &mut Command, sandbox: &Path) {
    cmd.env_clear()
        .env("PATH", std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()))
        .env("HOME", sandbox)
        .env("LANG", "C.UTF-8")
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .env("PYTHONHASHSEED", "0");
}

fn kill_group(pid: u32) {
    // The child leads its own process group, so this reaches everything it forked.
    unsafe {
        libc::killpg(pid as libc::pid_t, libc::SIGKILL);
    }
}

fn bounded_stderr(mut pipe: impl Read + Send + 'static) -> mpsc::Receiver<String> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        let mut truncated = false;
        loop {
            match pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = STDERR_LIMIT.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    truncated |= n > room;
                }
            }
        }
        let mut text = String::from_utf8_lossy(&kept).into_owned();
        if truncated {
            text.push_str("\n[stderr truncated]");
        }
        let _ = tx.send(text);
    });
    rx
}

/// Runs `req` through `runner` in a fresh sandbox.
pub fn execute_tests(req: &ExecutionRequest, runner: &RunnerHandle) -> Result<ExecutionResult, ExecError> {
    req.validate()?;
    let dir = tempfile::Builder::new()
        .prefix("wfeval-sandbox-")
        .tempdir()
        .map_err(|e| ExecError::SandboxSetup(e.to_string()))?;
    let root = dir.path().to_path_buf();
    let code_path = root.join(CODE_FILE);
    let tests_path = root.join(TESTS_FILE);
    let json_path = root.join(REPORT_FILE);
    fs::write(&code_path, &req.code).map_err(|e| ExecError::SandboxSetup(e.to_string()))?;
    fs::write(&tests_path, &req.tests).map_err(|e| ExecError::SandboxSetup(e.to_string()))?;

    let mut cmd = Command::new(&runner.program);
    cmd.args(&runner.args)
        .arg("--code")
        .arg(&code_path)
        .arg("--tests")
        .arg(&tests_path)
        .arg("--json")
        .arg(&json_path)
        .current_dir(&root)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .process_group(0);
    minimal_env(&mut cmd, &root);

    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| ExecError::SandboxSetup(format!("cannot launch {}: {e}", runner.program.display())))?;
    let pid = child.id();
    let stderr_rx = bounded_stderr(child.stderr.take().expect("stderr piped"));

    let deadline = start + Duration::from_secs_f64(req.timeout_s);
    let mut timed_out = false;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if Instant::now() >= deadline => {
                timed_out = true;
                kill_group(pid);
                break child.wait().ok();
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                kill_group(pid);
                let _ = child.wait();
                return Err(ExecError::Io(e.to_string()));
            }
        }
    };
    // Reap anything the runner left behind in its group.
    kill_group(pid);
    let wall_time_s = start.elapsed().as_secs_f64();
    let raw_stderr = stderr_rx.recv_timeout(Duration::from_secs_f64(GRACE_S / 2.0)).unwrap_or_default();
    let runner_exit_code = if timed_out { None } else { status.and_then(|s| s.code()) };

    let report = if timed_out {
        // A partial report is kept when it happens to be complete JSON.
        fs::read_to_string(&json_path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunnerReport>(&t).ok())
            .and_then(|r| validate_report(r, &req.tests).ok())
    } else {
        if runner_exit_code != Some(0) {
            return Err(protocol(format!(
                "runner exited with {} (stderr: {})",
                runner_exit_code.map_or("a signal".to_string(), |c| format!("status {c}")),
                raw_stderr.trim()
            )));
        }
        let text = fs::read_to_string(&json_path).map_err(|_| protocol("runner wrote no report"))?;
        let parsed: RunnerReport =
            serde_json::from_str(&text).map_err(|e| protocol(format!("malformed report: {e}")))?;
        Some(validate_report(parsed, &req.tests)?)
    };

    let sandbox = if req.keep_sandbox { Some(dir.keep()) } else { None };
    let report = report.unwrap_or(RunnerReport { outcomes: Vec::new(), collection_error: None, skipped: 0 });
    Ok(ExecutionResult {
        per_test: report.outcomes,
        timed_out,
        wall_time_s,
        runner_exit_code,
        raw_stderr,
        collection_error: report.collection_error,
        synthetic_error: timed_out.then(|| TIME_LIMIT_EXCEEDED.to_string()),
        skipped: report.skipped,
        sandbox,
    })
}

/// Runs many requests on a pool of at most `jobs` workers. Results come
/// back in input order.
pub fn execute_many(
    reqs: &[ExecutionRequest],
    runner: &RunnerHandle,
    jobs: usize,
) -> Vec<Result<ExecutionResult, ExecError>> {
    use rayon::prelude::*;
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(p) => p,
        Err(e) => return reqs.iter().map(|_| Err(ExecError::SandboxSetup(e.to_string()))).collect(),
    };
    pool.install(|| reqs.par_iter().map(|r| execute_tests(r, runner)).collect())
}

/// Outcome of post-hoc scoring for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Evaluation {
    Evaluated { result: ExecutionResult },
    NotEvaluated { reason: String },
}

impl Evaluation {
    pub fn result(&self) -> Option<&ExecutionResult> {
        match self {
            Evaluation::Evaluated { result } => Some(result),
            Evaluation::NotEvaluated { .. } => None,
        }
    }
}

/// What `runs/<run_id>/eval.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub run_id: String,
    pub task_id: String,
    pub variant: String,
    pub model_id: String,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

impl EvalRecord {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("eval.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self, ExecError> {
        let p = Self::path(run_dir);
        let text = fs::read_to_string(&p).map_err(|e| ExecError::Io(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| ExecError::Io(format!("{}: {e}", p.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), ExecError> {
        fs::create_dir_all(run_dir).map_err(|e| ExecError::Io(e.to_string()))?;
        let text = serde_json::to_string_pretty(self).expect("eval record serializes");
        fs::write(Self::path(run_dir), text + "\n").map_err(|e| ExecError::Io(e.to_string()))
    }
}

/// Scores a finished run against the benchmark tests (never the Tester's
/// own script). Runs that did not complete are marked not-evaluated. When
/// `run_dir` is given the record is written there as `eval.json`.
pub fn evaluate_final_code(
    run: &RunRecord,
    task: &TaskSpec,
    runner: &RunnerHandle,
    timeout_s: f64,
    keep_sandbox: bool,
    run_dir: Option<&Path>,
) -> Result<EvalRecord, ExecError> {
    let evaluation = if run.status != RunStatus::Completed {
        Evaluation::NotEvaluated { reason: format!("run status is {}", run.status) }
    } else if run.final_code.trim().is_empty() {
        Evaluation::NotEvaluated { reason: "run has no final code".into() }
    } else {
        let req = ExecutionRequest::new(run.final_code.clone(), task.test_suite.clone())
            .with_timeout(timeout_s)
            .keep_sandbox(keep_sandbox);
        Evaluation::Evaluated { result: execute_tests(&req, runner)? }
    };
    let record = EvalRecord {
        run_id: run.run_id.clone(),
        task_id: run.task_id.clone(),
        variant: run.variant.to_string(),
        model_id: run.model_id.clone(),
        evaluation,
    };
    if let Some(dir) = run_dir {
        record.save(dir)?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use std::os::unix::fs::PermissionsExt;

    use super::*;

    const SUITE: &str = "import unittest\n\nclass TestAAdd(unittest.TestCase):\n    def test_1(self):\n        pass\n    def test_2(self):\n        pass\n";

    fn stub(dir: &Path, name: &str, body: &str) -> RunnerHandle {
        let path = dir.join(name);
        let script = format!(
            "#!/bin/sh\nwhile [ $# -gt 0 ]; do case \"$1\" in --json) out=\"$2\";; esac; shift; done\n{body}\n"
        );
        fs::write(&path, script).unwrap();
        fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
        RunnerHandle::new(path)
    }

    fn writes(json: &str) -> String {
        format!("cat > \"$out\" <<'EOF'\n{json}\nEOF")
    }

    #[test]
    fn traceback_names() {
        let tb = "Traceback (most recent call last):\n  File \"x.py\", line 3, in f\n    c.execute(q)\nsqlite3.OperationalError: no such table: users\n";
        assert_eq!(exception_from_traceback(tb).as_deref(), Some("sqlite3.OperationalError"));
        assert_eq!(exception_from_traceback("Traceback:\n  x\nKeyError: 'a'").as_deref(), Some("KeyError"));
        assert_eq!(exception_from_traceback("builtins.ValueError: bad").as_deref(), Some("ValueError"));
        assert_eq!(exception_from_traceback("  indented only"), None);
        let chained = "Traceback...\nKeyError: 1\n\nDuring handling of the above exception, another exception occurred:\n\nTraceback...\n  File \"x\"\nTypeError: boom\n";
        assert_eq!(exception_from_traceback(chained).as_deref(), Some("TypeError"));
    }

    #[test]
    fn outcomes_round_trip_from_stub() {
        let d = tempfile::tempdir().unwrap();
        let r = stub(
            d.path(),
            "r.sh",
            &writes(r#"{"outcomes":[{"group":"TestAAdd","case":"test_1","status":"Pass","exception_type":null,"traceback":"","duration_s":0.01},{"group":"TestAAdd","case":"test_2","status":"Fail","exception_type":"AssertionError","traceback":"Traceback\nAssertionError: 1 != 2","duration_s":0.02}]}"#),
        );
        let res = execute_tests(&ExecutionRequest::new("class A: pass", SUITE).with_timeout(2.0), &r).unwrap();
        assert!(!res.timed_out);
        assert_eq!(res.per_test.len(), 2);
        assert_eq!(res.per_test[1].exception_type.as_deref(), Some("AssertionError"));
        assert_eq!(res.runner_exit_code, Some(0));
        assert!(!res.all_passed());
        let back: ExecutionResult = serde_json::from_str(&serde_json::to_string(&res).unwrap()).unwrap();
        assert_eq!(back, res);
    }

    #[test]
    fn missing_exception_type_is_read_from_traceback() {
        let d = tempfile::tempdir().unwrap();
        let r = stub(
            d.path(),
            "r.sh",
            &writes(r#"{"outcomes":[{"group":"TestAAdd","case":"test_1","status":"Error","traceback":"Traceback\n  File x\nZeroDivisionError: division by zero"}]}"#),
        );
        let res = execute_tests(&ExecutionRequest::new("class A: pass", SUITE).with_timeout(2.0), &r).unwrap();
        assert_eq!(res.per_test[0].exception_type.as_deref(), Some("ZeroDivisionError"));
    }

    #[test]
    fn protocol_faults() {
        let d = tempfile::tempdir().unwrap();
        let req = ExecutionRequest::new("class A: pass", SUITE).with_timeout(2.0);
        let bad_json = stub(d.path(), "a.sh", "echo '{not json' > \"$out\"");
        assert!(matches!(execute_tests(&req, &bad_json), Err(ExecError::RunnerProtocol(m)) if m.contains("malformed")));
        let nonzero = stub(d.path(), "b.sh", "echo boom >&2; exit 3");
        assert!(matches!(execute_tests(&req, &nonzero), Err(ExecError::RunnerProtocol(m)) if m.contains("status 3") && m.contains("boom")));
        let no_report = stub(d.path(), "c.sh", "exit 0");
        assert!(matches!(execute_tests(&req, &no_report), Err(ExecError::RunnerProtocol(_))));
        let unknown_case = stub(
            d.path(),
            "e.sh",
            &writes(r#"{"outcomes":[{"group":"TestNope","case":"test_1","status":"Pass"}]}"#),
        );
        assert!(matches!(execute_tests(&req, &unknown_case), Err(ExecError::RunnerProtocol(_))));
        let pass_with_exc = stub(
            d.path(),
            "f.sh",
            &writes(r#"{"outcomes":[{"group":"TestAAdd","case":"test_1","status":"Pass","exception_type":"KeyError"}]}"#),
        );
        assert!(execute_tests(&req, &pass_with_exc).is_err());
        let missing = RunnerHandle::new(d.path().join("does-not-exist"));
        assert!(matches!(execute_tests(&req, &missing), Err(ExecError::SandboxSetup(_))));
    }

    #[test]
    fn invalid_requests() {
        let r = RunnerHandle::new("/bin/true");
        assert!(execute_tests(&ExecutionRequest::new("", SUITE), &r).is_err());
        assert!(execute_tests(&ExecutionRequest::new("x", SUITE).with_timeout(0.0), &r).is_err());
    }

    #[test]
    fn timeout_kills_process_group() {
        let d = tempfile::tempdir().unwrap();
        // Background children keep stderr open; they must die with the group.
        let r = stub(d.path(), "slow.sh", "sleep 60 &\nsleep 60 &\nsleep 60");
        let start = Instant::now();
        let res = execute_tests(&ExecutionRequest::new("class A: pass", SUITE).with_timeout(1.0), &r).unwrap();
        assert!(start.elapsed() < Duration::from_secs_f64(1.0 + GRACE_S));
        assert!(res.timed_out);
        assert_eq!(res.synthetic_error.as_deref(), Some(TIME_LIMIT_EXCEEDED));
        assert!(res.error_types().contains(TIME_LIMIT_EXCEEDED));
        assert_eq!(res.runner_exit_code, None);
        assert!(!res.all_passed());
    }

    #[test]
    fn sandbox_is_fresh_and_removed() {
        let d = tempfile::tempdir().unwrap();
        // Fails the protocol if a file from an earlier run is still around.
        let r = stub(
            d.path(),
            "fresh.sh",
            &format!(
                "dir=$(dirname \"$out\")\n[ -e \"$dir/leftover\" ] && exit 9\ntouch \"$dir/leftover\"\n[ \"$HOME\" = \"$dir\" ] || exit 8\n{}",
                writes(r#"{"outcomes":[]}"#)
            ),
        );
        let req = ExecutionRequest::new("class A: pass", SUITE).with_timeout(2.0);
        let a = execute_tests(&req, &r).unwrap();
        let b = execute_tests(&req, &r).unwrap();
        assert_eq!(a.per_test, b.per_test);
        assert!(a.sandbox.is_none());

        let kept = execute_tests(&req.clone().keep_sandbox(true), &r).unwrap();
        let path = kept.sandbox.clone().unwrap();
        assert!(path.join(CODE_FILE).exists());
        assert_eq!(fs::read_to_string(path.join(TESTS_FILE)).unwrap(), SUITE);
        fs::remove_dir_all(path).unwrap();
    }

    #[test]
    fn pool_preserves_order() {
        let d = tempfile::tempdir().unwrap();
        let r = stub(d.path(), "ok.sh", &writes(r#"{"outcomes":[{"group":"TestAAdd","case":"test_1","status":"Pass"}]}"#));
        let reqs: Vec<_> = (0..6).map(|i| ExecutionRequest::new(format!("class A{i}: pass"), SUITE).with_timeout(5.0)).collect();
        let out = execute_many(&reqs, &r, 3);
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|r| r.as_ref().unwrap().all_passed()));
    }

    #[test]
    fn stderr_is_bounded() {
        let d = tempfile::tempdir().unwrap();
        let r = stub(
            d.path(),
            "noisy.sh",
            &format!("head -c 200000 /dev/zero | tr '\\0' x >&2\n{}", writes(r#"{"outcomes":[]}"#)),
        );
        let res = execute_tests(&ExecutionRequest::new("class A: pass", SUITE).with_timeout(5.0), &r).unwrap();
        assert!(res.raw_stderr.len() <= STDERR_LIMIT + 32);
        assert!(res.raw_stderr.ends_with("[stderr truncated]"));
    }
}
