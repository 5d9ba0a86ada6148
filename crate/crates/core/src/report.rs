//! Report tables: metric aggregation plus aligned-text and CSV renderings.
//!
//! Every table is built once as a [`Table`] and both renderers read the same
//! cell strings, so the two outputs never disagree on a number.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::{Bucket, FrequencyTable, TaxonomyMatrix, ONE_OFF};
use crate::corpus::Corpus;
use crate::exec::EvalRecord;
use crate::metrics::{
    class_correct, count_ncloc, format_percent, function_flags, import_issue_report, relative_change, FunctionTally,
    IssueCategory, IssueExport, MetricRow, MetricsError, QualityReport,
};
use crate::process::{id_safe, ProcessVariant, RunDescriptor, RunRecord};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("missing data for {}", .0.join(", "))]
    MissingData(Vec<String>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Improved,
    Regressed,
    Neutral,
}

impl Trend {
    fn of(value: f64, baseline: f64, higher_is_better: bool) -> Self {
        if value == baseline {
            Trend::Neutral
        } else if (value > baseline) == higher_is_better {
            Trend::Improved
        } else {
            Trend::Regressed
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Trend::Improved => "improved",
            Trend::Regressed => "regressed",
            Trend::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cell {
    /// Formatted raw value; `-` when absent.
    pub value: String,
    /// Signed percentage against the baseline, `n/a` for a zero rate
    /// baseline, `None` on the baseline itself.
    pub change: Option<String>,
    pub trend: Option<Trend>,
    pub run_ids: Vec<String>,
}

impl Cell {
    fn absent() -> Self {
        Cell { value: "-".into(), ..Default::default() }
    }

    fn text(&self) -> String {
        match &self.change {
            Some(c) => format!("{} ({c})", self.value),
            None => self.value.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Data,
    /// Heading of a block of rows; may carry its own cells.
    Block,
    Footer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub label: String,
    pub level: usize,
    pub kind: RowKind,
    /// Empty for heading-only rows, otherwise one per column.
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub group: String,
    pub header: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub title: String,
    pub label_header: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
    pub footnotes: Vec<String>,
}

impl Table {
    /// Column groups in order, joined with ` | `.
    pub fn group_header(&self) -> String {
        let mut groups: Vec<&str> = Vec::new();
        for c in &self.columns {
            if groups.last() != Some(&c.group.as_str()) {
                groups.push(&c.group);
            }
        }
        groups.join(" | ")
    }

    pub fn render_text(&self, provenance: bool) -> String {
        let label = |r: &Row| format!("{}{}", "  ".repeat(r.level), r.label);
        let label_w = self.rows.iter().map(|r| label(r).len()).chain([self.label_header.len()]).max().unwrap_or(0);
        let widths: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(i, c)| {
                self.rows
                    .iter()
                    .filter_map(|r| r.cells.get(i))
                    .map(|cell| cell.text().len())
                    .chain([c.header.len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let sep = |i: usize| {
            if i > 0 && self.columns[i].group != self.columns[i - 1].group {
                " | "
            } else {
                "  "
            }
        };
        let line = |label_text: &str, cells: &[String]| {
            let mut s = format!("{label_text:<label_w$}");
            for (i, text) in cells.iter().enumerate() {
                s.push_str(if i == 0 { " | " } else { sep(i) });
                let _ = write!(s, "{text:>w$}", w = widths[i]);
            }
            s.trim_end().to_string()
        };

        let mut out = format!("{}\n\n{}\n", self.title, self.group_header());
        let header = line(&self.label_header, &self.columns.iter().map(|c| c.header.clone()).collect::<Vec<_>>());
        let rule = "-".repeat(header.len());
        let _ = writeln!(out, "{header}\n{rule}");
        for r in &self.rows {
            if r.kind == RowKind::Footer {
                let _ = writeln!(out, "{rule}");
            }
            let cells: Vec<String> = r.cells.iter().map(Cell::text).collect();
            let _ = writeln!(out, "{}", line(&label(r), &cells));
        }
        for f in &self.footnotes {
            let _ = writeln!(out, "\n{f}");
        }
        if provenance {
            out.push_str("\nProvenance\n");
            for r in &self.rows {
                for (c, cell) in self.columns.iter().zip(&r.cells) {
                    if !cell.run_ids.is_empty() {
                        let _ = writeln!(out, "  {} / {} / {}: {}", r.label, c.group, c.header, cell.run_ids.join(", "));
                    }
                }
            }
        }
        out
    }

    /// Long format, one record per cell.
    pub fn render_csv(&self, provenance: bool) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row", "level", "group", "column", "value", "change", "trend"];
        if provenance {
            header.push("run_ids");
        }
        let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            for (c, cell) in self.columns.iter().zip(&r.cells) {
                let level = r.level.to_string();
                let mut rec = vec![
                    r.label.as_str(),
                    level.as_str(),
                    c.group.as_str(),
                    c.header.as_str(),
                    cell.value.as_str(),
                    cell.change.as_deref().unwrap_or(""),
                    cell.trend.map_or("", Trend::as_str),
                ];
                let ids = cell.run_ids.join(";");
                if provenance {
                    rec.push(&ids);
                }
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Writes `<stem>.txt` and `<stem>.csv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str, provenance: bool) -> Result<(PathBuf, PathBuf), ReportError> {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
        let txt = dir.join(format!("{stem}.txt"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&txt, self.render_text(provenance)).map_err(|source| ReportError::Io { path: txt.clone(), source })?;
        fs::write(&csv, self.render_csv(provenance)?).map_err(|source| ReportError::Io { path: csv.clone(), source })?;
        Ok((txt, csv))
    }
}

fn rate_cell(value: f64, baseline: Option<f64>, higher_is_better: bool, run_ids: Vec<String>) -> Cell {
    let (change, trend) = match baseline {
        None => (None, None),
        Some(b) => (
            Some(relative_change(value, b).map_or_else(|| "n/a".to_string(), format_percent)),
            Some(Trend::of(value, b, higher_is_better)),
        ),
    };
    Cell { value: format!("{value:.4}"), change, trend, run_ids }
}

fn count_cell(value: u64, baseline: Option<u64>, change: i64, run_ids: Vec<String>) -> Cell {
    let (change, trend) = match baseline {
        None => (None, None),
        Some(b) => (Some(format_percent(change)), Some(Trend::of(value as f64, b as f64, false))),
    };
    Cell { value: value.to_string(), change, trend, run_ids }
}

fn run_ids_of(tasks: &[String], model: &str, variant: ProcessVariant) -> Vec<String> {
    tasks.iter().map(|t| RunDescriptor::new(t, variant, model).run_id).collect()
}

/// File name of the analyzer export for one (model, variant) cell.
pub fn quality_file_name(model: &str, variant: ProcessVariant) -> String {
    format!("{}__{}.json", id_safe(model), variant.slug())
}

/// Reads the exports present under `dir` for the given axes.
pub fn load_quality_dir(
    dir: &Path,
    models: &[String],
    variants: &[ProcessVariant],
) -> Result<BTreeMap<(String, ProcessVariant), IssueExport>, ReportError> {
    let mut out = BTreeMap::new();
    for m in models {
        for &v in variants {
            let path = dir.join(quality_file_name(m, v));
            if path.is_file() {
                out.insert((m.clone(), v), import_issue_report(&path)?);
            }
        }
    }
    Ok(out)
}

/// Aggregates evaluations into one [`MetricRow`] per (model, variant).
///
/// Each run is one sample (n = 1); runs that could not be evaluated count as
/// incorrect at both levels. Densities come from `quality` when a cell has
/// an export, over the native ncLOC of the cell's final code in `runs`.
pub fn aggregate_metrics(
    evals: &[EvalRecord],
    runs: &[RunRecord],
    corpus: &Corpus,
    quality: &BTreeMap<(String, ProcessVariant), IssueExport>,
    models: &[String],
    variants: &[ProcessVariant],
) -> Result<Vec<MetricRow>, ReportError> {
    let code: BTreeMap<&str, &str> = runs.iter().map(|r| (r.run_id.as_str(), r.final_code.as_str())).collect();
    let mut missing = Vec::new();
    let mut rows = Vec::new();
    for m in models {
        for &v in variants {
            let cell: Vec<&EvalRecord> = evals
                .iter()
                .filter(|e| &e.model_id == m && e.variant.parse::<ProcessVariant>().ok() == Some(v))
                .collect();
            if cell.is_empty() {
                missing.push(format!("{m}/{v}"));
                continue;
            }
            let mut correct = 0u64;
            let mut tally = FunctionTally::default();
            for e in &cell {
                let test_map = corpus.get(&e.task_id).map(|t| &t.test_map);
                match e.evaluation.result() {
                    Some(r) => {
                        correct += u64::from(class_correct(r));
                        if let Some(tm) = test_map {
                            tally.add(&function_flags(r, tm));
                        }
                    }
                    None => {
                        if let Some(tm) = test_map {
                            let methods: BTreeMap<String, bool> = tm
                                .values()
                                .filter(|m| m.as_str() != crate::corpus::CLASS_SENTINEL)
                                .map(|m| (m.clone(), false))
                                .collect();
                            tally.add(&methods);
                        }
                    }
                }
            }
            let densities = match quality.get(&(m.clone(), v)) {
                Some(export) => {
                    let ncloc: u64 =
                        cell.iter().filter_map(|e| code.get(e.run_id.as_str())).map(|c| count_ncloc(c) as u64).sum();
                    QualityReport::build(export.clone(), ncloc)?.densities
                }
                None => BTreeMap::new(),
            };
            rows.push(MetricRow {
                model_id: m.clone(),
                variant: v.name().to_string(),
                n: 1,
                class_pass1: correct as f64 / cell.len() as f64,
                function_pass1: tally.value(),
                densities,
                run_ids: cell.iter().map(|e| e.run_id.clone()).collect(),
            });
        }
    }
    if missing.is_empty() {
        Ok(rows)
    } else {
        Err(ReportError::MissingData(missing))
    }
}

/// `reports/metrics.csv`: one wide row per (model, variant).
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String, ReportError> {
    let csv_err = |e: csv::Error| ReportError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> =
        ["model", "variant", "n", "class_pass1", "function_pass1"].iter().map(|s| s.to_string()).collect();
    header.extend(IssueCategory::ALL.iter().map(|c| c.name().to_ascii_lowercase()));
    header.push("run_ids".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.model_id.clone(),
            r.variant.clone(),
            r.n.to_string(),
            format!("{:.4}", r.class_pass1),
            r.function_pass1.map(|f| format!("{f:.4}")).unwrap_or_default(),
        ];
        rec.extend(IssueCategory::ALL.iter().map(|c| r.densities.get(c).map(|d| format!("{d:.4}")).unwrap_or_default()));
        rec.push(r.run_ids.join(";"));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub const PASS_GROUP: &str = "Pass@1 (Class, Function)";
pub const QUALITY_GROUP: &str = "Software Quality";
pub const CLEAN_GROUP: &str = "Clean Code";

/// Pass@1 and issue densities per model and variant, with changes against
/// the same model's baseline row.
pub fn comparison_table(rows: &[MetricRow], baseline: ProcessVariant) -> Result<Table, ReportError> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model_id.as_str()) {
            models.push(&r.model_id);
        }
    }
    let missing: Vec<String> = models
        .iter()
        .filter(|m| !rows.iter().any(|r| r.model_id == **m && r.variant == baseline.name()))
        .map(|m| format!("{m}/{baseline}"))
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::MissingData(missing));
    }
    // Security and Responsibility only appear when some row has them.
    let shown = |c: &IssueCategory| {
        !matches!(c, IssueCategory::Security | IssueCategory::Responsibility)
            || rows.iter().any(|r| r.densities.get(c).is_some_and(|d| *d != 0.0))
    };
    let quality: Vec<IssueCategory> = IssueCategory::SOFTWARE_QUALITY.into_iter().filter(shown).collect();
    let clean: Vec<IssueCategory> = IssueCategory::CLEAN_CODE.into_iter().filter(shown).collect();
    let mut columns = vec![
        Column { group: PASS_GROUP.into(), header: "Class".into() },
        Column { group: PASS_GROUP.into(), header: "Function".into() },
    ];
    columns.extend(quality.iter().map(|c| Column { group: QUALITY_GROUP.into(), header: c.name().into() }));
    columns.extend(clean.iter().map(|c| Column { group: CLEAN_GROUP.into(), header: c.name().into() }));

    let mut out_rows = Vec::new();
    let mut ns = BTreeSet::new();
    for m in &models {
        out_rows.push(Row { label: m.to_string(), level: 0, kind: RowKind::Block, cells: vec![] });
        let base = rows.iter().find(|r| r.model_id == *m && r.variant == baseline.name()).expect("checked above");
        for r in rows.iter().filter(|r| r.model_id == *m) {
            ns.insert(r.n);
            let is_base = r.variant == baseline.name();
            let b = |v: f64| (!is_base).then_some(v);
            let mut cells = vec![rate_cell(r.class_pass1, b(base.class_pass1), true, r.run_ids.clone())];
            cells.push(match (r.function_pass1, base.function_pass1) {
                (Some(f), bf) => rate_cell(f, if is_base { None } else { bf }, true, r.run_ids.clone()),
                (None, _) => Cell::absent(),
            });
            for c in quality.iter().chain(&clean) {
                cells.push(match (r.densities.get(c), base.densities.get(c)) {
                    (Some(d), bd) => rate_cell(*d, if is_base { None } else { bd.copied() }, false, r.run_ids.clone()),
                    (None, _) => Cell::absent(),
                });
            }
            out_rows.push(Row { label: r.variant.clone(), level: 1, kind: RowKind::Data, cells });
        }
    }
    let n_list = ns.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    Ok(Table {
        title: format!("Process comparison (baseline {baseline})"),
        label_header: "Model / Variant".into(),
        columns,
        rows: out_rows,
        footnotes: vec![
            format!("Samples per task n = {n_list}. Densities are issues per 10 ncLOC; documentation strings count as comments."),
            "Changes are relative to the baseline row of the same model; n/a marks a zero baseline.".into(),
        ],
    })
}

fn variant_columns(models: &[String], variants: &[ProcessVariant]) -> Vec<Column> {
    models
        .iter()
        .flat_map(|m| variants.iter().map(move |v| Column { group: m.clone(), header: v.name().into() }))
        .collect()
}

/// Error-type frequencies: most frequent under the baseline first, the
/// One-Off bucket last, then a total row.
pub fn errors_table(t: &FrequencyTable) -> Table {
    let axes: Vec<(&String, ProcessVariant)> =
        t.models.iter().flat_map(|m| t.variants.iter().map(move |v| (m, *v))).collect();
    let prov = |row: &str, m: &str, v: ProcessVariant| {
        t.provenance.get(&(row.to_string(), m.to_string(), v)).map(|ts| run_ids_of(ts, m, v)).unwrap_or_default()
    };
    let make_row = |name: &str, kind: RowKind, count: &dyn Fn(&str, ProcessVariant) -> u64, change: &dyn Fn(&str, ProcessVariant) -> i64| Row {
        label: name.to_string(),
        level: 0,
        kind,
        cells: axes
            .iter()
            .map(|(m, v)| {
                let base = (*v != t.baseline).then(|| count(m, t.baseline));
                count_cell(count(m, *v), base, change(m, *v), prov(name, m, *v))
            })
            .collect(),
    };
    let mut rows: Vec<Row> = t
        .rows
        .iter()
        .map(|r| {
            let name = r.error_type.as_str();
            make_row(name, RowKind::Data, &|m, v| t.count(name, m, v), &|m, v| t.change(name, m, v))
        })
        .collect();
    rows.push(make_row(ONE_OFF, RowKind::Data, &|m, v| t.count(ONE_OFF, m, v), &|m, v| t.change(ONE_OFF, m, v)));
    rows.push(make_row("Total", RowKind::Footer, &|m, v| t.total(m, v), &|m, v| t.total_change(m, v)));

    let mut footnotes = vec![format!(
        "Counts are distinct classes per error type; changes are relative to {} of the same model.",
        t.baseline
    )];
    for (m, types) in &t.one_off_bucket {
        footnotes.push(format!("{ONE_OFF} for {m}: {}", types.join(", ")));
    }
    Table {
        title: format!("Runtime error frequency (baseline {})", t.baseline),
        label_header: "Error type".into(),
        columns: variant_columns(&t.models, &t.variants),
        rows,
        footnotes,
    }
}

/// Failure-cause counts: one block per category with its subcategories
/// indented below.
pub fn taxonomy_table(t: &TaxonomyMatrix) -> Table {
    let rows = Bucket::ordered()
        .into_iter()
        .map(|b| {
            let cells = t
                .models
                .iter()
                .flat_map(|m| t.variants.iter().map(move |v| (m, *v)))
                .map(|(m, v)| {
                    let base = (v != t.baseline).then(|| t.count(b, m, t.baseline));
                    let ids = t.provenance.get(&(b, m.clone(), v)).map(|ts| run_ids_of(ts, m, v)).unwrap_or_default();
                    count_cell(t.count(b, m, v), base, t.change(b, m, v), ids)
                })
                .collect();
            match b {
                Bucket::Category(_) => Row { label: b.name().into(), level: 0, kind: RowKind::Block, cells },
                Bucket::Subcategory(_) => Row { label: b.name().into(), level: 1, kind: RowKind::Data, cells },
            }
        })
        .collect();
    let cross: u64 = t
        .supplemental
        .iter()
        .filter(|((b, _, _), _)| matches!(b, Bucket::Category(_)))
        .map(|(_, n)| n)
        .sum();
    Table {
        title: format!("Failure taxonomy (baseline {})", t.baseline),
        label_header: "Category / Subcategory".into(),
        columns: variant_columns(&t.models, &t.variants),
        rows,
        footnotes: vec![format!("Primary labels only; {cross} cross-reference(s) are kept apart.")],
    }
}
