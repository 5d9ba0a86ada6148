mod common;

use common::{outcome, result};
use wfeval_core::analysis::{
    build_frequency_table, build_taxonomy_matrix, dedup_records, extract_errors, parse_annotations, AnalysisError,
    Bucket, Category, ErrorRecord, RunKey, Subcategory, ViolationKind, ONE_OFF,
};
use wfeval_core::exec::TestStatus;
use wfeval_core::report::{errors_table, taxonomy_table, RowKind};
use wfeval_core::ProcessVariant::{self, RawPrompt as Raw, WaterfallFull as Full};

#[test]
fn repeated_error_types_collapse_per_class() {
    let r = result(vec![
        outcome("TestStackPush", "test_push_1", TestStatus::Fail, Some("AssertionError")),
        outcome("TestStackPush", "test_push_2", TestStatus::Fail, Some("AssertionError")),
        outcome("TestStackPop", "test_pop_1", TestStatus::Fail, Some("AssertionError")),
        outcome("TestStackPeek", "test_peek_1", TestStatus::Error, Some("ValueError")),
        outcome("TestStackSize", "test_size_1", TestStatus::Pass, None),
    ]);
    let key = RunKey::new("stack", Full, "m");
    let records = extract_errors(&r, &key);
    let types: Vec<&str> = records.iter().map(|e| e.error_type.as_str()).collect();
    assert_eq!(types, ["AssertionError", "ValueError"]);

    let mut twice = records.clone();
    twice.extend(records.clone());
    assert_eq!(dedup_records(&twice), records);
}

fn rec(model: &str, variant: ProcessVariant, task: &str, error: &str) -> ErrorRecord {
    ErrorRecord { task_id: task.into(), variant, model_id: model.into(), error_type: error.into() }
}

/// 20 distinct records over two models, plus one duplicate.
fn frequency_fixture() -> Vec<ErrorRecord> {
    let mut v = Vec::new();
    for t in ["t1", "t2", "t3"] {
        v.push(rec("m1", Raw, t, "AssertionError"));
    }
    for t in ["t1", "t2", "t4"] {
        v.push(rec("m1", Full, t, "AssertionError"));
    }
    v.push(rec("m1", Raw, "t1", "TypeError"));
    v.push(rec("m1", Raw, "t2", "KeyError"));
    v.push(rec("m1", Full, "t3", "KeyError"));
    for t in ["t1", "t2", "t3"] {
        v.push(rec("m1", Full, t, "NameError"));
    }
    v.push(rec("m2", Raw, "t1", "AssertionError"));
    v.push(rec("m2", Full, "t1", "AssertionError"));
    for t in ["t1", "t2", "t3"] {
        v.push(rec("m2", Raw, t, "ValueError"));
    }
    v.push(rec("m2", Full, "t4", "ValueError"));
    v.push(rec("m2", Full, "t1", "TypeError"));
    v.push(rec("m2", Full, "t2", "TypeError"));
    v.push(rec("m1", Raw, "t1", "AssertionError"));
    v
}

fn models() -> Vec<String> {
    vec!["m1".into(), "m2".into()]
}

#[test]
fn one_off_absorption_keeps_model_totals() {
    let records = frequency_fixture();
    assert_eq!(dedup_records(&records).len(), 20);
    let t = build_frequency_table(&records, &models(), &[Raw, Full], Raw).unwrap();

    let rows: Vec<&str> = t.rows.iter().map(|r| r.error_type.as_str()).collect();
    assert_eq!(rows, ["AssertionError", "ValueError", "NameError"]);

    let expected_totals = [("m1", Raw, 5), ("m1", Full, 7), ("m2", Raw, 4), ("m2", Full, 4)];
    for (m, v, total) in expected_totals {
        assert_eq!(t.total(m, v), total, "{m}/{v}");
        let visible: u64 = t.rows.iter().map(|r| t.count(&r.error_type, m, v)).sum();
        assert_eq!(visible + t.count(ONE_OFF, m, v), total, "{m}/{v}");
    }
    let per_model = |m: &str| t.total(m, Raw) + t.total(m, Full);
    assert_eq!(per_model("m1"), 12);
    assert_eq!(per_model("m2"), 8);

    assert_eq!(t.count(ONE_OFF, "m1", Raw), 2);
    assert_eq!(t.count(ONE_OFF, "m1", Full), 1);
    assert_eq!(t.count(ONE_OFF, "m2", Raw), 1);
    assert_eq!(t.count(ONE_OFF, "m2", Full), 3);
    // absorbed for m2 only
    assert_eq!(t.count("AssertionError", "m2", Raw), 0);
    assert_eq!(t.count("AssertionError", "m1", Raw), 3);
    assert_eq!(t.one_off_bucket["m1"], ["KeyError", "TypeError"]);
    assert_eq!(t.one_off_bucket["m2"], ["AssertionError", "TypeError"]);

    assert_eq!(t.total_change("m1", Full), 40);
    assert_eq!(t.change("NameError", "m1", Full), 300);
    assert_eq!(t.change("ValueError", "m2", Full), -67);
}

#[test]
fn errors_table_puts_one_off_and_total_last() {
    let t = build_frequency_table(&frequency_fixture(), &models(), &[Raw, Full], Raw).unwrap();
    let table = errors_table(&t);
    let labels: Vec<&str> = table.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["AssertionError", "ValueError", "NameError", ONE_OFF, "Total"]);
    assert_eq!(table.rows.last().unwrap().kind, RowKind::Footer);
    assert_eq!(table.group_header(), "m1 | m2");
    assert_eq!(table.columns.len(), 4);

    let total = &table.rows[4];
    assert_eq!(total.cells[1].value, "7");
    assert_eq!(total.cells[1].change.as_deref(), Some("+40%"));
    assert_eq!(total.cells[0].change, None);
    assert_eq!(total.cells[1].run_ids.len(), 7);

    let text = table.render_text(false);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.iter().any(|l| l.starts_with("NameError") && l.contains("3 (+300%)")), "{text}");
    let total_at = lines.iter().position(|l| l.starts_with("Total")).unwrap();
    assert!(lines[total_at - 1].chars().all(|c| c == '-'));
    assert!(lines[total_at - 2].starts_with(ONE_OFF));
}

#[test]
fn missing_baseline_is_an_error() {
    let err = build_frequency_table(&frequency_fixture(), &models(), &[Full], Raw).unwrap_err();
    assert_eq!(err, AnalysisError::MissingBaseline(Raw));
}

#[test]
fn taxonomy_shape_is_enforced() {
    assert_eq!(Category::ALL.len(), 6);
    assert_eq!(Subcategory::ALL.len(), 29);
    let sizes: Vec<usize> = Category::ALL.iter().map(|c| c.subcategories().len()).collect();
    assert_eq!(sizes, [8, 4, 3, 7, 4, 3]);
    for s in Subcategory::ALL {
        assert!(s.category().subcategories().contains(s));
        assert_eq!(s.display_name().parse::<Subcategory>().unwrap(), *s);
    }
    assert_eq!("Spec-Test Mismatch".parse::<Subcategory>().unwrap(), Subcategory::SpecTestMismatch);
    assert_eq!("missing_import_test".parse::<Subcategory>().unwrap(), Subcategory::MissingImportTest);
}

fn line(task: &str, variant: &str, cat: &str, sub: &str, primary: bool) -> String {
    format!(
        r#"{{"task_id":"{task}","variant":"{variant}","model_id":"m1","category":"{cat}","subcategory":"{sub}","primary":{primary}}}"#
    )
}

fn violations(text: &str) -> Vec<ViolationKind> {
    match parse_annotations(text, None) {
        Err(AnalysisError::InvalidAnnotations(v)) => v.into_iter().map(|v| v.kind).collect(),
        other => panic!("expected violations, got {other:?}"),
    }
}

#[test]
fn duplicate_primary_is_rejected() {
    let text = [
        line("t1", "raw", "Missing Code", "Missing Function", true),
        line("t1", "raw", "Semantic Failure", "Wrong Algorithm", true),
    ]
    .join("\n");
    assert_eq!(violations(&text), [ViolationKind::DuplicatePrimary { first_line: 1 }]);
}

#[test]
fn unknown_names_are_rejected() {
    let text = line("t1", "raw", "Missing Code", "Missing Semicolon", true);
    assert_eq!(violations(&text), [ViolationKind::UnknownSubcategory("Missing Semicolon".into())]);

    let text = line("t1", "raw", "Style", "Missing Function", true);
    assert_eq!(violations(&text), [ViolationKind::UnknownCategory("Style".into())]);

    let text = line("t1", "raw", "Dataset", "Timeout", true);
    assert_eq!(
        violations(&text),
        [ViolationKind::CategoryMismatch { category: Category::Dataset, subcategory: Subcategory::Timeout }]
    );

    let text = line("t1", "raw", "Dataset", "Faulty Test", false);
    assert_eq!(violations(&text), [ViolationKind::MissingPrimary]);
}

#[test]
fn orphan_labels_are_rejected() {
    let failing = [RunKey::new("t2", Raw, "m1")].into_iter().collect();
    let text = line("t1", "raw", "Dataset", "Faulty Test", true);
    match parse_annotations(&text, Some(&failing)) {
        Err(AnalysisError::InvalidAnnotations(v)) => assert_eq!(v[0].kind, ViolationKind::OrphanLabel),
        other => panic!("{other:?}"),
    }
}

/// Ten primary labels, two secondary labels and one cross-reference.
fn twelve_labels() -> String {
    let mut lines = vec![
        line("t1", "raw", "Missing Code", "Missing Function", true),
        line("t1", "raw", "Return Mismatch", "Format Mismatch", false),
        line("t2", "raw", "Missing Code", "Renamed Class", true),
        r#"{"task_id":"t3","variant":"raw","model_id":"m1","category":"Semantic Failure","subcategory":"Wrong Algorithm","primary":true,"cross_refs":[{"category":"Input Validation","subcategory":"Faulty Validation"}]}"#.to_string(),
        line("t4", "raw", "Input Validation", "Missing Input Validation", true),
        line("t5", "raw", "Dataset", "Faulty Test", true),
        line("t1", "full", "Missing Code", "Missing Function", true),
        line("t2", "full", "Semantic Failure", "Wrong Algorithm", true),
        line("t2", "full", "Semantic Failure", "Wrong Edge Case Handling", false),
        line("t3", "full", "Semantic Failure", "Timeout", true),
        line("t4", "full", "Return Mismatch", "Type Mismatch", true),
        line("t6", "full", "Environment", "Undeclared Dependency", true),
    ];
    lines.insert(5, String::new());
    lines.join("\n")
}

#[test]
fn twelve_labels_roll_up_by_hand() {
    let labels = parse_annotations(&twelve_labels(), None).unwrap();
    assert_eq!(labels.len(), 12);
    let m = build_taxonomy_matrix(&labels, &["m1".to_string()], &[Raw, Full], Raw).unwrap();

    let expected = [
        (Category::MissingCode, 2, 1),
        (Category::ReturnMismatch, 0, 1),
        (Category::InputValidation, 1, 0),
        (Category::SemanticFailure, 1, 2),
        (Category::Dataset, 1, 0),
        (Category::Environment, 0, 1),
    ];
    for (cat, raw, full) in expected {
        assert_eq!(m.count(Bucket::Category(cat), "m1", Raw), raw, "{cat}");
        assert_eq!(m.count(Bucket::Category(cat), "m1", Full), full, "{cat}");
        for v in [Raw, Full] {
            let subs: u64 = cat.subcategories().iter().map(|s| m.count(Bucket::Subcategory(*s), "m1", v)).sum();
            assert_eq!(subs, m.count(Bucket::Category(cat), "m1", v));
        }
    }
    assert_eq!(m.count(Bucket::Subcategory(Subcategory::MissingFunction), "m1", Full), 1);
    assert_eq!(m.count(Bucket::Subcategory(Subcategory::FormatMismatch), "m1", Raw), 0);
    assert_eq!(m.labelled_runs[&("m1".to_string(), Raw)], 5);
    assert_eq!(m.labelled_runs[&("m1".to_string(), Full)], 5);
    assert_eq!(m.supplemental_count(Bucket::Category(Category::InputValidation), "m1", Raw), 1);
    assert_eq!(m.count(Bucket::Category(Category::InputValidation), "m1", Raw), 1);

    assert_eq!(m.change(Bucket::Category(Category::MissingCode), "m1", Full), -50);
    assert_eq!(m.change(Bucket::Category(Category::ReturnMismatch), "m1", Full), 100);
    assert_eq!(m.change(Bucket::Category(Category::SemanticFailure), "m1", Full), 100);
}

#[test]
fn taxonomy_table_has_six_blocks() {
    let labels = parse_annotations(&twelve_labels(), None).unwrap();
    let m = build_taxonomy_matrix(&labels, &["m1".to_string()], &[Raw, Full], Raw).unwrap();
    let t = taxonomy_table(&m);
    assert_eq!(t.rows.len(), 35);
    let blocks: Vec<&str> = t.rows.iter().filter(|r| r.kind == RowKind::Block).map(|r| r.label.as_str()).collect();
    assert_eq!(
        blocks,
        ["Missing Code", "Return Mismatch", "Input Validation", "Semantic Failure", "Dataset", "Environment"]
    );
    assert!(t.rows.iter().filter(|r| r.kind == RowKind::Data).all(|r| r.level == 1));
    assert_eq!(t.rows[0].cells[0].value, "2");
    assert_eq!(t.rows[0].cells[1].change.as_deref(), Some("-50%"));
    assert_eq!(t.rows[0].cells[0].run_ids, ["t1__raw__m1", "t2__raw__m1"]);
    let text = t.render_text(false);
    assert!(text.contains("\n  Missing Function"), "{text}");
    assert!(t.footnotes[0].contains("1 cross-reference"));
}
