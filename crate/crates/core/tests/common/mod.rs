#![allow(dead_code)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use wfeval_core::agents::{classify_envelope, GenerationParams, Purpose, TaskKind, TemplateSet};
use wfeval_core::exec::{ExecError, ExecutionResult, RunnerHandle, TestOutcome, TestStatus};
use wfeval_core::gateway::{oracle_gateway, GatewayError, ModelGateway, ModelResponse, ScriptedGateway};
use wfeval_core::process::ScriptExecutor;
use wfeval_core::{Corpus, TaskSpec};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn corpus() -> Corpus {
    Corpus::load_strict(fixtures().join("corpus")).expect("fixture corpus loads")
}

/// The first `n` fixture tasks as a corpus.
pub fn small_corpus(n: usize) -> Corpus {
    let mut c = corpus();
    c.tasks.truncate(n);
    c
}

pub fn task(id: &str) -> TaskSpec {
    corpus().get(id).cloned().expect("fixture task")
}

pub fn oracle(corpus: &Corpus) -> ScriptedGateway {
    oracle_gateway(corpus.clone(), TemplateSet::defaults())
}

pub fn params() -> GenerationParams {
    GenerationParams::default()
}

pub fn outcome(group: &str, case: &str, status: TestStatus, exc: Option<&str>) -> TestOutcome {
    TestOutcome {
        group: group.into(),
        case: case.into(),
        status,
        exception_type: exc.map(str::to_string),
        traceback: exc.map(|e| format!("Traceback (most recent call last):\n  File \"test_candidate.py\", line 9\n{e}: boom\n")).unwrap_or_default(),
        duration_s: 0.0,
    }
}

pub fn result(per_test: Vec<TestOutcome>) -> ExecutionResult {
    ExecutionResult {
        per_test,
        timed_out: false,
        wall_time_s: 0.0,
        runner_exit_code: Some(0),
        raw_stderr: String::new(),
        collection_error: None,
        synthetic_error: None,
        skipped: 0,
        sandbox: None,
    }
}

/// Executor whose every script run passes.
pub fn passing_executor() -> impl ScriptExecutor {
    |_: &str, _: &str| -> Result<ExecutionResult, ExecError> {
        Ok(result(vec![outcome("TestSmoke", "test_defined", TestStatus::Pass, None)]))
    }
}

/// Executor whose every script run has a failing case.
pub fn failing_executor() -> impl ScriptExecutor {
    |_: &str, _: &str| -> Result<ExecutionResult, ExecError> {
        Ok(result(vec![
            outcome("TestSmoke", "test_defined", TestStatus::Pass, None),
            outcome("TestSmoke", "test_behaviour", TestStatus::Fail, Some("AssertionError")),
        ]))
    }
}

/// Delegates to `inner` except for prompts asking for `fail_on`.
pub struct FailingAt<G> {
    pub inner: G,
    pub corpus: Corpus,
    pub fail_on: TaskKind,
}

impl<G: ModelGateway> ModelGateway for FailingAt<G> {
    fn complete(
        &self,
        envelope: &wfeval_core::agents::PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let templates = TemplateSet::defaults();
        let hit = self.corpus.tasks.iter().any(|t| {
            classify_envelope(&templates, envelope, &t.class_name) == Some(Purpose::Produce(self.fail_on))
        });
        if hit {
            return Err(GatewayError::Transport("connection reset".into()));
        }
        self.inner.complete(envelope, params, model_id)
    }
}

/// Writes an executable shell runner that follows the protocol flags and
/// runs `body` with `$code`, `$tests` and `$out` set.
pub fn stub_runner(dir: &Path, name: &str, body: &str) -> RunnerHandle {
    let path = dir.join(name);
    let script = format!(
        "#!/bin/sh\nwhile [ $# -gt 0 ]; do case \"$1\" in --code) code=\"$2\";; --tests) tests=\"$2\";; --json) out=\"$2\";; esac; shift; done\n{body}\n"
    );
    fs::write(&path, script).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    RunnerHandle::new(path)
}

/// A runner that reports every `def test_*` of every `TestCase` class in the
/// suite as passed, or as a NotImplementedError when the candidate has no
/// `return`.
pub fn awk_runner(dir: &Path) -> RunnerHandle {
    stub_runner(
        dir,
        "awk_runner.sh",
        r#"if grep -Eq "^[[:space:]]+return( |$)" "$code"; then st=pass; exc=""; else st=error; exc=NotImplementedError; fi
awk -v st="$st" -v exc="$exc" '
BEGIN { printf "{\"outcomes\":["; n = 0 }
/^class [A-Za-z_0-9]+\(.*TestCase\)/ { c = $2; sub(/\(.*/, "", c) }
/^    def test/ { t = $2; sub(/\(.*/, "", t);
  if (n++) printf ",";
  if (st == "pass") printf "{\"group\":\"%s\",\"case\":\"%s\",\"status\":\"pass\"}", c, t;
  else printf "{\"group\":\"%s\",\"case\":\"%s\",\"status\":\"error\",\"traceback\":\"Traceback (most recent call last):\\n%s: not done\\n\"}", c, t, exc;
}
END { printf "]}\n" }' "$tests" > "$out""#,
    )
}
