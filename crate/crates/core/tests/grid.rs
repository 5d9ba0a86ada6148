mod common;

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use wfeval_core::agents::TemplateSet;
use wfeval_core::gateway::Provider;
use wfeval_core::grid::{
    error_records, evaluate_grid, failing_runs, load_evaluations, load_runs, run_grid, CellStatus, EvalOptions,
    GridError, RunManifest, MANIFEST_FILE,
};
use wfeval_core::metrics::{count_ncloc, IssueCategory};
use wfeval_core::process::{Pipeline, ProcessVariant, RUN_LOG};
use wfeval_core::report::{
    aggregate_metrics, comparison_table, load_quality_dir, quality_file_name, CLEAN_GROUP, PASS_GROUP, QUALITY_GROUP,
};
use wfeval_core::Corpus;

const MODEL: &str = "model-a";

struct Fixture {
    corpus: Corpus,
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture { corpus: common::small_corpus(2), dir: tempfile::tempdir().unwrap() }
    }

    fn output(&self) -> &Path {
        self.dir.path()
    }

    fn runs(&self) -> std::path::PathBuf {
        self.dir.path().join("runs")
    }

    fn manifest(&self, digest: &str) -> RunManifest {
        RunManifest::new(digest, &self.corpus, Provider::Scripted, &[MODEL.to_string()], &ProcessVariant::ALL)
    }

    /// Opens (or creates) the manifest and runs what is pending.
    fn run(&self) -> (RunManifest, Vec<String>, usize, usize) {
        let templates = TemplateSet::defaults();
        let gw = common::oracle(&self.corpus);
        let exec = common::passing_executor();
        let pipeline = Pipeline::new(&templates, &gw, &exec, common::params());
        let mut m = RunManifest::open_or_create(self.output(), self.manifest("d1")).unwrap();
        let calls = AtomicUsize::new(0);
        let s = run_grid(&mut m, &self.corpus, &pipeline, self.output(), &self.runs(), "py", 3, &|_| {
            calls.fetch_add(1, Ordering::SeqCst);
        })
        .unwrap();
        (m, s.executed, s.skipped, calls.into_inner())
    }
}

#[test]
fn fresh_grid_runs_every_cell() {
    let f = Fixture::new();
    let (m, executed, skipped, calls) = f.run();
    assert_eq!(executed.len(), 10);
    assert_eq!(skipped, 0);
    assert_eq!(calls, 10);
    assert_eq!(executed[0], "bank_account__raw__model-a");
    assert!(m.is_complete());
    assert_eq!(m.status_counts()["Completed"], 10);
    assert!(f.output().join(MANIFEST_FILE).is_file());
    for e in &m.entries {
        assert!(f.runs().join(&e.descriptor.run_id).join(RUN_LOG).is_file());
    }
    assert_eq!(RunManifest::load(f.output()).unwrap(), m);
    assert_eq!(load_runs(&f.runs()).unwrap().len(), 10);
}

#[test]
fn resume_only_runs_missing_cells() {
    let f = Fixture::new();
    f.run();
    let before = fs::read(f.runs().join("bank_account__full__model-a").join(RUN_LOG)).unwrap();

    let (_, executed, skipped, _) = f.run();
    assert!(executed.is_empty());
    assert_eq!(skipped, 10);

    fs::remove_file(f.runs().join("calculator__no-req__model-a").join(RUN_LOG)).unwrap();
    fs::remove_dir_all(f.runs().join("bank_account__raw__model-a")).unwrap();
    let mut m = RunManifest::load(f.output()).unwrap();
    let idx = m.entries.iter().position(|e| e.descriptor.run_id == "calculator__full__model-a").unwrap();
    m.entries[idx].status = CellStatus::GatewayFailed;
    m.save(f.output()).unwrap();

    let (m, executed, skipped, _) = f.run();
    assert_eq!(
        executed,
        ["bank_account__raw__model-a", "calculator__full__model-a", "calculator__no-req__model-a"]
    );
    assert_eq!(skipped, 7);
    assert!(m.is_complete());
    assert_eq!(fs::read(f.runs().join("bank_account__full__model-a").join(RUN_LOG)).unwrap(), before);
}

#[test]
fn mismatching_manifest_is_refused() {
    let f = Fixture::new();
    f.run();
    let err = RunManifest::open_or_create(f.output(), f.manifest("d2")).unwrap_err();
    match err {
        GridError::ManifestMismatch(what) => assert!(what.contains("configuration digest"), "{what}"),
        other => panic!("{other:?}"),
    }
    let mut other = f.manifest("d1");
    other.provider = Provider::Replay;
    assert!(matches!(RunManifest::open_or_create(f.output(), other), Err(GridError::ManifestMismatch(_))));
    let bigger = RunManifest::new(
        "d1",
        &f.corpus,
        Provider::Scripted,
        &[MODEL.to_string(), "model-b".to_string()],
        &ProcessVariant::ALL,
    );
    assert!(matches!(RunManifest::open_or_create(f.output(), bigger), Err(GridError::ManifestMismatch(_))));
}

#[test]
fn evaluation_feeds_the_comparison_report() {
    let f = Fixture::new();
    let (m, ..) = f.run();
    let runner = common::awk_runner(f.output());
    let opts = EvalOptions { timeout_s: 30.0, jobs: 2, ..Default::default() };
    let (evals, failures) = evaluate_grid(&m, &f.corpus, &f.runs(), &runner, &opts).unwrap();
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(evals.len(), 10);
    assert!(f.runs().join("calculator__raw__model-a").join("eval.json").is_file());
    assert_eq!(load_evaluations(&f.runs()).unwrap().len(), 10);
    assert!(error_records(&evals).is_empty());
    assert!(failing_runs(&evals).is_empty());

    // A second pass reuses the stored evaluations.
    let (again, _) = evaluate_grid(&m, &f.corpus, &f.runs(), &runner, &opts).unwrap();
    assert_eq!(again, evals);

    let quality = tempfile::tempdir().unwrap();
    let export = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/quality/export.json");
    fs::copy(&export, quality.path().join(quality_file_name(MODEL, ProcessVariant::RawPrompt))).unwrap();
    let models = [MODEL.to_string()];
    let quality = load_quality_dir(quality.path(), &models, &ProcessVariant::ALL).unwrap();
    assert_eq!(quality.len(), 1);

    let runs = load_runs(&f.runs()).unwrap();
    let rows = aggregate_metrics(&evals, &runs, &f.corpus, &quality, &models, &ProcessVariant::ALL).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.class_pass1 == 1.0 && r.function_pass1 == Some(1.0)));
    assert_eq!(rows[0].run_ids, ["bank_account__raw__model-a", "calculator__raw__model-a"]);

    let ncloc: usize = runs
        .iter()
        .filter(|r| r.run_id.contains("__raw__"))
        .map(|r| count_ncloc(&r.final_code))
        .sum();
    let maint = rows[0].densities[&IssueCategory::Maintainability];
    assert!((maint - 70.0 / ncloc as f64).abs() < 1e-12);

    let table = comparison_table(&rows, ProcessVariant::RawPrompt).unwrap();
    assert_eq!(table.group_header(), format!("{PASS_GROUP} | {QUALITY_GROUP} | {CLEAN_GROUP}"));
    let headers: Vec<&str> = table.columns.iter().map(|c| c.header.as_str()).collect();
    assert_eq!(
        headers,
        [
            "Class",
            "Function",
            "Security",
            "Reliability",
            "Maintainability",
            "Consistency",
            "Intentionality",
            "Adaptability",
            "Responsibility"
        ]
    );
    assert_eq!(table.rows[1].cells[0].value, "1.0000");
    assert_eq!(table.rows[2].cells[0].change.as_deref(), Some("0%"));
    assert_eq!(table.rows[2].cells[4].value, "-");

    let text = table.render_text(true);
    let csv_text = table.render_csv(true).unwrap();
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let mut seen = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let (label, level, value, change) = (&rec[0], &rec[1], &rec[4], &rec[5]);
        let shown = if change.is_empty() { value.to_string() } else { format!("{value} ({change})") };
        let indent = "  ".repeat(level.parse().unwrap());
        let line = text.lines().find(|l| l.starts_with(&format!("{indent}{label} "))).unwrap();
        assert!(line.contains(&shown), "{shown} missing from `{line}`");
        seen += 1;
    }
    assert_eq!(seen, 5 * 9);
    assert!(text.contains("Provenance"));
}
