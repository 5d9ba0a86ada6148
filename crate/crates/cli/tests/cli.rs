use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wfeval_core::Corpus;

const PASSING_RUNNER: &str = r#"#!/bin/sh
while [ $# -gt 0 ]; do case "$1" in --code) code="$2";; --tests) tests="$2";; --json) out="$2";; esac; shift; done
if grep -Eq "^[[:space:]]+return( |$)" "$code"; then st=pass; else st=error; fi
awk -v st="$st" '
BEGIN { printf "{\"outcomes\":["; n = 0 }
/^class [A-Za-z_0-9]+\(.*TestCase\)/ { c = $2; sub(/\(.*/, "", c) }
/^    def test/ { t = $2; sub(/\(.*/, "", t);
  if (n++) printf ",";
  if (st == "pass") printf "{\"group\":\"%s\",\"case\":\"%s\",\"status\":\"pass\"}", c, t;
  else printf "{\"group\":\"%s\",\"case\":\"%s\",\"status\":\"error\",\"traceback\":\"NotImplementedError\\n\"}", c, t;
}
END { printf "]}\n" }' "$tests" > "$out"
"#;

const FAILING_RUNNER: &str = r#"#!/bin/sh
while [ $# -gt 0 ]; do case "$1" in --code) code="$2";; --tests) tests="$2";; --json) out="$2";; esac; shift; done
awk '
BEGIN { printf "{\"outcomes\":["; n = 0 }
/^class [A-Za-z_0-9]+\(.*TestCase\)/ { c = $2; sub(/\(.*/, "", c) }
/^    def test/ { t = $2; sub(/\(.*/, "", t);
  if (n++) printf ",";
  printf "{\"group\":\"%s\",\"case\":\"%s\",\"status\":\"fail\",\"traceback\":\"AssertionError: 1 != 2\\n\"}", c, t;
}
END { printf "]}\n" }' "$tests" > "$out"
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Two fixture tasks, one model, the scripted provider and a passing
    /// protocol runner.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus");
        let mut corpus = Corpus::load_strict(fixtures).unwrap();
        corpus.tasks.truncate(2);
        corpus.write_dir(dir.path().join("corpus")).unwrap();
        for (name, body) in [("runner.sh", PASSING_RUNNER), ("failing.sh", FAILING_RUNNER)] {
            let p = dir.path().join(name);
            fs::write(&p, body).unwrap();
            fs::set_permissions(&p, fs::Permissions::from_mode(0o755)).unwrap();
        }
        fs::write(
            dir.path().join("experiment.toml"),
            r#"corpus = "corpus"
output = "out"
models = ["model-a"]
provider = "scripted"
jobs = 2

[execution]
runner = "./runner.sh"
timeout_s = 30
"#,
        )
        .unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn wfeval(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_wfeval")).current_dir(self.dir.path()).args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.wfeval(args);
        assert!(
            out.status.success(),
            "wfeval {args:?} exited {:?}\nstdout:\n{}\nstderr:\n{}",
            out.status.code(),
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

const CFG: [&str; 2] = ["-c", "experiment.toml"];

fn with_cfg<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(CFG);
    v
}

#[test]
fn run_resumes_and_reports() {
    let ws = Workspace::new();
    let out = ws.ok(&with_cfg(&["run"]));
    assert!(out.starts_with("10 cell(s) run, 0 already done"), "{out}");
    assert!(out.contains("Completed 10"), "{out}");

    let out = ws.ok(&with_cfg(&["run"]));
    assert!(out.starts_with("0 cell(s) run, 10 already done"), "{out}");

    fs::remove_file(ws.path("out/runs/calculator__no-design__model-a/run.jsonl")).unwrap();
    fs::remove_dir_all(ws.path("out/runs/bank_account__raw__model-a")).unwrap();
    let out = ws.ok(&with_cfg(&["run"]));
    assert!(out.starts_with("2 cell(s) run, 8 already done"), "{out}");

    let out = ws.ok(&with_cfg(&["evaluate"]));
    assert!(out.starts_with("10 evaluated (10 class-correct), 0 not evaluated, 0 failed"), "{out}");

    let out = ws.ok(&with_cfg(&["report", "comparison", "--provenance"]));
    assert!(out.contains("Pass@1 (Class, Function) | Software Quality | Clean Code"), "{out}");
    assert!(out.contains("Provenance"), "{out}");
    for f in ["comparison.txt", "comparison.csv", "metrics.csv"] {
        assert!(ws.path("out/reports").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(ws.path("out/reports/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.lines().nth(1).unwrap().starts_with("model-a,RawPrompt,1,1.0000,1.0000,"), "{metrics}");

    let out = ws.ok(&with_cfg(&["report", "errors"]));
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("One-Off") || l.starts_with("Total")).collect();
    assert_eq!(rows.len(), 2, "{out}");
}

#[test]
fn error_report_from_failing_runner() {
    let ws = Workspace::new();
    ws.ok(&with_cfg(&["run"]));
    let out = ws.ok(&with_cfg(&["evaluate", "--runner", "./failing.sh"]));
    assert!(out.starts_with("10 evaluated (0 class-correct)"), "{out}");

    let out = ws.ok(&with_cfg(&["analyze", "errors"]));
    let line = out.lines().find(|l| l.starts_with("AssertionError")).unwrap_or_else(|| panic!("{out}"));
    assert!(line.contains("2 (0%)"), "{line}");
    let records = fs::read_to_string(ws.path("out/analysis/error_records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 10);

    let out = ws.ok(&with_cfg(&["analyze", "taxonomy", "--suggest"]));
    assert!(out.starts_with("10 suggestion row(s)"), "{out}");

    // Stored evaluations are reused unless forced.
    let out = ws.ok(&with_cfg(&["evaluate"]));
    assert!(out.starts_with("10 evaluated (0 class-correct)"), "{out}");
    let out = ws.ok(&with_cfg(&["evaluate", "--force"]));
    assert!(out.starts_with("10 evaluated (10 class-correct)"), "{out}");
}

#[test]
fn recorded_grid_replays_byte_identically() {
    let ws = Workspace::new();
    ws.ok(&with_cfg(&["run", "--record", "cassette.jsonl"]));
    assert!(ws.path("cassette.jsonl").is_file());
    let out = ws.ok(&with_cfg(&["replay", "--cassette", "cassette.jsonl", "--out", "replayed", "--verify"]));
    assert!(out.contains("verified: 10 run log(s) byte-identical"), "{out}");
}

#[test]
fn taxonomy_labels_are_validated() {
    let ws = Workspace::new();
    ws.ok(&with_cfg(&["run"]));
    ws.ok(&with_cfg(&["evaluate", "--runner", "./failing.sh"]));
    fs::write(
        ws.path("labels.jsonl"),
        concat!(
            r#"{"task_id":"calculator","variant":"raw","model_id":"model-a","category":"Semantic Failure","subcategory":"Wrong Algorithm","primary":true}"#,
            "\n",
            r#"{"task_id":"calculator","variant":"full","model_id":"model-a","category":"Dataset","subcategory":"Faulty Test","primary":true}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = ws.ok(&with_cfg(&["report", "taxonomy", "--labels", "labels.jsonl"]));
    assert!(out.lines().any(|l| l.starts_with("Semantic Failure") && l.contains(" 1 ")), "{out}");
    assert!(ws.path("out/reports/taxonomy.csv").is_file());

    fs::write(
        ws.path("bad.jsonl"),
        r#"{"task_id":"calculator","variant":"raw","model_id":"model-a","category":"Dataset","subcategory":"Flaky Test","primary":true}"#,
    )
    .unwrap();
    let out = ws.wfeval(&with_cfg(&["report", "taxonomy", "--labels", "bad.jsonl"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnknownSubcategory"));
}

#[test]
fn mismatching_configuration_is_refused() {
    let ws = Workspace::new();
    ws.ok(&with_cfg(&["run"]));
    let cfg = fs::read_to_string(ws.path("experiment.toml")).unwrap();
    fs::write(ws.path("experiment.toml"), cfg.replace("jobs = 2", "jobs = 2\nrefinement_rounds = 2")).unwrap();
    let out = ws.wfeval(&with_cfg(&["run"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration digest"));
    let out = ws.ok(&with_cfg(&["run", "--fresh"]));
    assert!(out.starts_with("10 cell(s) run, 0 already done"), "{out}");
}

#[test]
fn corpus_lint_lists_every_task() {
    let ws = Workspace::new();
    let out = ws.ok(&["corpus", "lint", "corpus"]);
    assert_eq!(out, "bank_account OK\ncalculator OK\n");

    fs::remove_file(ws.path("corpus/calculator/solution.py")).unwrap();
    let out = ws.wfeval(&["corpus", "lint", "corpus"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("bank_account OK\ncalculator "), "{text}");
    assert!(!text.ends_with("calculator OK\n"));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let ws = Workspace::new();
    fs::write(ws.path("broken.toml"), "corpus = \"corpus\"\nmodels = []\n").unwrap();
    let out = ws.wfeval(&["run", "-c", "broken.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
