//! Runtime-error frequencies and failure-taxonomy labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskSpec;
use crate::exec::{ExecutionResult, TIME_LIMIT_EXCEEDED};
use crate::metrics::relative_change;
use crate::process::ProcessVariant;

pub const ONE_OFF: &str = "One-Off Errors";
/// Error types seen at most this many times for a model, across all
/// variants, move to the One-Off bucket.
pub const ONE_OFF_THRESHOLD: u64 = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("baseline variant {0} is not part of the data")]
    MissingBaseline(ProcessVariant),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{} invalid annotation(s):\n{}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"))]
    InvalidAnnotations(Vec<Violation>),
}

/// Identifies one generated class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub task_id: String,
    pub variant: ProcessVariant,
    pub model_id: String,
}

impl RunKey {
    pub fn new(task_id: impl Into<String>, variant: ProcessVariant, model_id: impl Into<String>) -> Self {
        Self { task_id: task_id.into(), variant, model_id: model_id.into() }
    }
}

impl fmt::Display for RunKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.task_id, self.variant, self.model_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub task_id: String,
    pub variant: ProcessVariant,
    pub model_id: String,
    pub error_type: String,
}

/// One record per distinct error type in `result`, including the
/// collection error and the synthetic timeout error.
pub fn extract_errors(result: &ExecutionResult, key: &RunKey) -> Vec<ErrorRecord> {
    result
        .error_types()
        .into_iter()
        .map(|error_type| ErrorRecord {
            task_id: key.task_id.clone(),
            variant: key.variant,
            model_id: key.model_id.clone(),
            error_type,
        })
        .collect()
}

/// Drops repeated (task, variant, model, error type) records.
pub fn dedup_records(records: &[ErrorRecord]) -> Vec<ErrorRecord> {
    records.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Percent change for counts. A zero baseline reads as "one unit", so
/// 0 -> 2 is +200%.
pub fn count_change(value: u64, baseline: u64) -> i64 {
    if baseline == 0 {
        value as i64 * 100
    } else {
        relative_change(value as f64, baseline as f64).expect("nonzero baseline")
    }
}

pub type CellKey = (String, ProcessVariant);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyRow {
    pub error_type: String,
    /// Number of distinct classes per (model, variant). Cells absorbed into
    /// the model's One-Off bucket read 0 here.
    pub counts: BTreeMap<CellKey, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    pub models: Vec<String>,
    pub variants: Vec<ProcessVariant>,
    pub baseline: ProcessVariant,
    /// Visible rows, most frequent under the baseline first.
    pub rows: Vec<FrequencyRow>,
    pub one_off: BTreeMap<CellKey, u64>,
    /// Error types absorbed per model.
    pub one_off_bucket: BTreeMap<String, Vec<String>>,
    pub totals: BTreeMap<CellKey, u64>,
    /// Task ids behind every (row, model, variant) cell; the One-Off and
    /// total rows use [`ONE_OFF`] and `"Total"`.
    pub provenance: BTreeMap<(String, String, ProcessVariant), Vec<String>>,
}

impl FrequencyTable {
    fn get(map: &BTreeMap<CellKey, u64>, model: &str, variant: ProcessVariant) -> u64 {
        map.get(&(model.to_string(), variant)).copied().unwrap_or(0)
    }

    pub fn count(&self, error_type: &str, model: &str, variant: ProcessVariant) -> u64 {
        if error_type == ONE_OFF {
            return Self::get(&self.one_off, model, variant);
        }
        self.rows
            .iter()
            .find(|r| r.error_type == error_type)
            .map_or(0, |r| Self::get(&r.counts, model, variant))
    }

    pub fn total(&self, model: &str, variant: ProcessVariant) -> u64 {
        Self::get(&self.totals, model, variant)
    }

    /// Change of a cell relative to the same model's baseline cell.
    pub fn change(&self, error_type: &str, model: &str, variant: ProcessVariant) -> i64 {
        count_change(self.count(error_type, model, variant), self.count(error_type, model, self.baseline))
    }

    pub fn total_change(&self, model: &str, variant: ProcessVariant) -> i64 {
        count_change(self.total(model, variant), self.total(model, self.baseline))
    }
}

/// Builds the frequency table over explicit axes. `records` are deduplicated
/// first; records outside the axes are ignored.
pub fn build_frequency_table(
    records: &[ErrorRecord],
    models: &[String],
    variants: &[ProcessVariant],
    baseline: ProcessVariant,
) -> Result<FrequencyTable, AnalysisError> {
    if !variants.contains(&baseline) {
        return Err(AnalysisError::MissingBaseline(baseline));
    }
    let records: Vec<ErrorRecord> = dedup_records(records)
        .into_iter()
        .filter(|r| models.contains(&r.model_id) && variants.contains(&r.variant))
        .collect();

    // error type -> (model, variant) -> task ids
    let mut cells: BTreeMap<String, BTreeMap<CellKey, Vec<String>>> = BTreeMap::new();
    for r in &records {
        cells
            .entry(r.error_type.clone())
            .or_default()
            .entry((r.model_id.clone(), r.variant))
            .or_default()
            .push(r.task_id.clone());
    }

    let mut one_off: BTreeMap<CellKey, u64> = BTreeMap::new();
    let mut one_off_bucket: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut totals: BTreeMap<CellKey, u64> = BTreeMap::new();
    let mut provenance: BTreeMap<(String, String, ProcessVariant), Vec<String>> = BTreeMap::new();
    let mut rows = Vec::new();
    for (error_type, by_cell) in &cells {
        let mut counts: BTreeMap<CellKey, u64> = BTreeMap::new();
        for model in models {
            let model_total: u64 = variants
                .iter()
                .map(|v| by_cell.get(&(model.clone(), *v)).map_or(0, |t| t.len() as u64))
                .sum();
            if model_total == 0 {
                continue;
            }
            let absorbed = model_total <= ONE_OFF_THRESHOLD;
            if absorbed {
                one_off_bucket.entry(model.clone()).or_default().push(error_type.clone());
            }
            for v in variants {
                let key = (model.clone(), *v);
                let tasks = by_cell.get(&key).cloned().unwrap_or_default();
                let n = tasks.len() as u64;
                *totals.entry(key.clone()).or_insert(0) += n;
                provenance.entry(("Total".into(), model.clone(), *v)).or_default().extend(tasks.iter().cloned());
                if absorbed {
                    *one_off.entry(key).or_insert(0) += n;
                    provenance.entry((ONE_OFF.into(), model.clone(), *v)).or_default().extend(tasks);
                } else {
                    counts.insert(key, n);
                    provenance.insert((error_type.clone(), model.clone(), *v), tasks);
                }
            }
        }
        if counts.values().any(|&n| n > 0) {
            rows.push(FrequencyRow { error_type: error_type.clone(), counts });
        }
    }
    for list in provenance.values_mut() {
        list.sort();
    }

    let baseline_sum = |r: &FrequencyRow| -> u64 {
        r.counts.iter().filter(|((_, v), _)| *v == baseline).map(|(_, n)| n).sum()
    };
    let overall = |r: &FrequencyRow| -> u64 { r.counts.values().sum() };
    rows.sort_by(|a, b| {
        baseline_sum(b)
            .cmp(&baseline_sum(a))
            .then(overall(b).cmp(&overall(a)))
            .then(a.error_type.cmp(&b.error_type))
    });
    for model in models {
        for v in variants {
            totals.entry((model.clone(), *v)).or_insert(0);
            one_off.entry((model.clone(), *v)).or_insert(0);
        }
    }

    Ok(FrequencyTable {
        models: models.to_vec(),
        variants: variants.to_vec(),
        baseline,
        rows,
        one_off,
        one_off_bucket,
        totals,
        provenance,
    })
}

/// Axes taken from the records themselves: models sorted, variants in
/// declaration order.
pub fn axes_of(records: &[ErrorRecord]) -> (Vec<String>, Vec<ProcessVariant>) {
    let models: BTreeSet<String> = records.iter().map(|r| r.model_id.clone()).collect();
    let variants: BTreeSet<ProcessVariant> = records.iter().map(|r| r.variant).collect();
    (models.into_iter().collect(), variants.into_iter().collect())
}

macro_rules! taxonomy {
    ($( $cat:ident => $cat_name:literal { $( $sub:ident => $sub_name:literal ),+ $(,)? } )+) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum Category { $( $cat ),+ }

        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum Subcategory { $( $( $sub ),+ ),+ }

        impl Category {
            pub const ALL: &'static [Category] = &[ $( Category::$cat ),+ ];

            pub fn display_name(self) -> &'static str {
                match self { $( Category::$cat => $cat_name ),+ }
            }

            pub fn subcategories(self) -> &'static [Subcategory] {
                match self { $( Category::$cat => &[ $( Subcategory::$sub ),+ ] ),+ }
            }
        }

        impl Subcategory {
            pub const ALL: &'static [Subcategory] = &[ $( $( Subcategory::$sub ),+ ),+ ];

            pub fn display_name(self) -> &'static str {
                match self { $( $( Subcategory::$sub => $sub_name ),+ ),+ }
            }

            pub fn category(self) -> Category {
                match self { $( $( Subcategory::$sub => Category::$cat ),+ ),+ }
            }
        }
    };
}

taxonomy! {
    MissingCode => "Missing Code" {
        RenamedVariable => "Renamed Variable",
        MissingVariable => "Missing Variable",
        MissingFunction => "Missing Function",
        RenamedFunction => "Renamed Function",
        MissingClass => "Missing Class",
        RenamedClass => "Renamed Class",
        MissingImport => "Missing Import",
        IncompleteImplementation => "Incomplete Implementation",
    }
    ReturnMismatch => "Return Mismatch" {
        ArityMismatch => "Arity Mismatch",
        OrderMismatch => "Order Mismatch",
        TypeMismatch => "Type Mismatch",
        FormatMismatch => "Format Mismatch",
    }
    InputValidation => "Input Validation" {
        OverrestrictiveValidation => "Overrestrictive Validation",
        FaultyValidation => "Faulty Validation",
        MissingInputValidation => "Missing Input Validation",
    }
    SemanticFailure => "Semantic Failure" {
        SpecViolation => "Spec Violation",
        SignatureMismatch => "Signature Mismatch",
        WrongAlgorithm => "Wrong Algorithm",
        WrongEdgeCaseHandling => "Wrong Edge Case Handling",
        Timeout => "Timeout",
        SyntaxError => "Syntax Error",
        IntegrationError => "Integration Error",
    }
    Dataset => "Dataset" {
        FaultySpec => "Faulty Spec",
        FaultyTest => "Faulty Test",
        MissingImportTest => "Missing Import (Test)",
        SpecTestMismatch => "Spec-Test Mismatch",
    }
    Environment => "Environment" {
        VersionIncompatibility => "Version Incompatibility",
        UndeclaredDependency => "Undeclared Dependency",
        DeprecatedDependency => "Deprecated Dependency",
    }
}

/// Lowercase alphanumerics only, so `Spec-Test Mismatch`, `SpecTestMismatch`
/// and `spec_test_mismatch` compare equal.
fn fold(s: &str) -> String {
    s.chars().filter(|c| c.is_ascii_alphanumeric()).map(|c| c.to_ascii_lowercase()).collect()
}

impl FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f = fold(s);
        Category::ALL
            .iter()
            .find(|c| fold(c.display_name()) == f)
            .copied()
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

impl FromStr for Subcategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f = fold(s);
        Subcategory::ALL
            .iter()
            .find(|c| fold(c.display_name()) == f || fold(&format!("{c:?}")) == f)
            .copied()
            .ok_or_else(|| format!("unknown subcategory `{s}`"))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl fmt::Display for Subcategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LabelRef {
    pub category: Category,
    pub subcategory: Subcategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyLabel {
    pub task_id: String,
    pub variant: ProcessVariant,
    pub model_id: String,
    pub category: Category,
    pub subcategory: Subcategory,
    pub primary: bool,
    #[serde(default)]
    pub cross_refs: Vec<LabelRef>,
}

impl TaxonomyLabel {
    pub fn key(&self) -> RunKey {
        RunKey::new(self.task_id.clone(), self.variant, self.model_id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    Malformed(String),
    UnknownCategory(String),
    UnknownSubcategory(String),
    CategoryMismatch { category: Category, subcategory: Subcategory },
    DuplicatePrimary { first_line: usize },
    MissingPrimary,
    OrphanLabel,
}

/// A rejected annotation line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: ", self.line)?;
        match &self.kind {
            ViolationKind::Malformed(m) => write!(f, "malformed record: {m}"),
            ViolationKind::UnknownCategory(c) => write!(f, "UnknownCategory `{c}`"),
            ViolationKind::UnknownSubcategory(s) => write!(f, "UnknownSubcategory `{s}`"),
            ViolationKind::CategoryMismatch { category, subcategory } => {
                write!(f, "subcategory `{subcategory}` does not belong to `{category}`")
            }
            ViolationKind::DuplicatePrimary { first_line } => {
                write!(f, "DuplicatePrimary: run already has a primary label on line {first_line}")
            }
            ViolationKind::MissingPrimary => write!(f, "MissingPrimary: run has labels but none is primary"),
            ViolationKind::OrphanLabel => write!(f, "OrphanLabel: no failing run matches this label"),
        }
    }
}

/// Raw line shape; names are checked against the taxonomy afterwards so
/// each problem gets its own message.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabel {
    task_id: String,
    variant: String,
    model_id: String,
    category: String,
    subcategory: String,
    #[serde(default)]
    primary: bool,
    #[serde(default)]
    cross_refs: Vec<RawRef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRef {
    category: String,
    subcategory: String,
}

fn resolve(category: &str, subcategory: &str) -> Result<LabelRef, ViolationKind> {
    let sub: Subcategory =
        subcategory.parse().map_err(|_| ViolationKind::UnknownSubcategory(subcategory.to_string()))?;
    let cat: Category = category.parse().map_err(|_| ViolationKind::UnknownCategory(category.to_string()))?;
    if sub.category() != cat {
        return Err(ViolationKind::CategoryMismatch { category: cat, subcategory: sub });
    }
    Ok(LabelRef { category: cat, subcategory: sub })
}

/// Validates annotation lines. `failing` (when given) is the set of runs
/// that failed evaluation; labels for anything else are orphans.
pub fn parse_annotations(text: &str, failing: Option<&BTreeSet<RunKey>>) -> Result<Vec<TaxonomyLabel>, AnalysisError> {
    let mut labels = Vec::new();
    let mut violations = Vec::new();
    let mut primary_line: BTreeMap<RunKey, usize> = BTreeMap::new();
    let mut first_line: BTreeMap<RunKey, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut bad = |kind| violations.push(Violation { line, kind });
        let r: RawLabel = match serde_json::from_str(raw) {
            Ok(r) => r,
            Err(e) => {
                bad(ViolationKind::Malformed(e.to_string()));
                continue;
            }
        };
        let variant: ProcessVariant = match r.variant.parse() {
            Ok(v) => v,
            Err(e) => {
                bad(ViolationKind::Malformed(e));
                continue;
            }
        };
        let main = match resolve(&r.category, &r.subcategory) {
            Ok(m) => m,
            Err(k) => {
                bad(k);
                continue;
            }
        };
        let mut refs = Vec::new();
        let mut ref_error = None;
        for x in &r.cross_refs {
            match resolve(&x.category, &x.subcategory) {
                Ok(m) => refs.push(m),
                Err(k) => ref_error = ref_error.or(Some(k)),
            }
        }
        if let Some(k) = ref_error {
            bad(k);
            continue;
        }
        let label = TaxonomyLabel {
            task_id: r.task_id,
            variant,
            model_id: r.model_id,
            category: main.category,
            subcategory: main.subcategory,
            primary: r.primary,
            cross_refs: refs,
        };
        let key = label.key();
        if failing.is_some_and(|f| !f.contains(&key)) {
            bad(ViolationKind::OrphanLabel);
            continue;
        }
        if label.primary {
            if let Some(&first) = primary_line.get(&key) {
                bad(ViolationKind::DuplicatePrimary { first_line: first });
                continue;
            }
            primary_line.insert(key.clone(), line);
        }
        first_line.entry(key).or_insert(line);
        labels.push(label);
    }
    for (key, line) in &first_line {
        if !primary_line.contains_key(key) {
            violations.push(Violation { line: *line, kind: ViolationKind::MissingPrimary });
        }
    }
    if violations.is_empty() {
        Ok(labels)
    } else {
        violations.sort_by_key(|v| v.line);
        Err(AnalysisError::InvalidAnnotations(violations))
    }
}

pub fn load_annotations(path: impl AsRef<Path>, failing: Option<&BTreeSet<RunKey>>) -> Result<Vec<TaxonomyLabel>, AnalysisError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| AnalysisError::Io(format!("{}: {e}", path.display())))?;
    parse_annotations(&text, failing)
}

/// A matrix row: a category block header or one of its subcategories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    Category(Category),
    Subcategory(Subcategory),
}

impl Bucket {
    pub fn name(self) -> &'static str {
        match self {
            Bucket::Category(c) => c.display_name(),
            Bucket::Subcategory(s) => s.display_name(),
        }
    }

    /// Table order: each category followed by its subcategories.
    pub fn ordered() -> Vec<Bucket> {
        Category::ALL
            .iter()
            .flat_map(|c| {
                std::iter::once(Bucket::Category(*c)).chain(c.subcategories().iter().map(|s| Bucket::Subcategory(*s)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyMatrix {
    pub models: Vec<String>,
    pub variants: Vec<ProcessVariant>,
    pub baseline: ProcessVariant,
    /// Primary-label counts.
    pub primary: BTreeMap<(Bucket, String, ProcessVariant), u64>,
    /// Cross-reference counts, kept apart from the primary view.
    pub supplemental: BTreeMap<(Bucket, String, ProcessVariant), u64>,
    /// Runs with a primary label per (model, variant).
    pub labelled_runs: BTreeMap<CellKey, u64>,
    pub provenance: BTreeMap<(Bucket, String, ProcessVariant), Vec<String>>,
}

impl TaxonomyMatrix {
    pub fn count(&self, bucket: Bucket, model: &str, variant: ProcessVariant) -> u64 {
        self.primary.get(&(bucket, model.to_string(), variant)).copied().unwrap_or(0)
    }

    pub fn supplemental_count(&self, bucket: Bucket, model: &str, variant: ProcessVariant) -> u64 {
        self.supplemental.get(&(bucket, model.to_string(), variant)).copied().unwrap_or(0)
    }

    pub fn change(&self, bucket: Bucket, model: &str, variant: ProcessVariant) -> i64 {
        count_change(self.count(bucket, model, variant), self.count(bucket, model, self.baseline))
    }
}

pub fn build_taxonomy_matrix(
    labels: &[TaxonomyLabel],
    models: &[String],
    variants: &[ProcessVariant],
    baseline: ProcessVariant,
) -> Result<TaxonomyMatrix, AnalysisError> {
    if !variants.contains(&baseline) {
        return Err(AnalysisError::MissingBaseline(baseline));
    }
    let mut m = TaxonomyMatrix {
        models: models.to_vec(),
        variants: variants.to_vec(),
        baseline,
        primary: BTreeMap::new(),
        supplemental: BTreeMap::new(),
        labelled_runs: BTreeMap::new(),
        provenance: BTreeMap::new(),
    };
    for l in labels.iter().filter(|l| models.contains(&l.model_id) && variants.contains(&l.variant)) {
        if l.primary {
            *m.labelled_runs.entry((l.model_id.clone(), l.variant)).or_insert(0) += 1;
            for b in [Bucket::Category(l.category), Bucket::Subcategory(l.subcategory)] {
                let key = (b, l.model_id.clone(), l.variant);
                *m.primary.entry(key.clone()).or_insert(0) += 1;
                m.provenance.entry(key).or_default().push(l.task_id.clone());
            }
        }
        for r in &l.cross_refs {
            for b in [Bucket::Category(r.category), Bucket::Subcategory(r.subcategory)] {
                *m.supplemental.entry((b, l.model_id.clone(), l.variant)).or_insert(0) += 1;
            }
        }
    }
    for list in m.provenance.values_mut() {
        list.sort();
    }
    Ok(m)
}

/// A heuristic label proposal. Never counted unless promoted by a human.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub category: Category,
    pub subcategory: Subcategory,
    /// Higher ranks first.
    pub score: f64,
    pub trigger: String,
}

static NAME_ERROR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"name '([A-Za-z_]\w*)' is not defined").unwrap());
static NO_ATTRIBUTE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(object|module '[\w.]+') has no attribute '([A-Za-z_]\w*)'").unwrap());
static CANNOT_IMPORT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"cannot import name '([A-Za-z_]\w*)'").unwrap());
static NO_MODULE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"No module named '([\w.]+)'").unwrap());
static ARG_COUNT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"takes \d+ positional arguments? but \d+ (?:was|were) given|missing \d+ required positional argument|got an unexpected keyword argument").unwrap()
});

/// Ranked heuristic suggestions for a failing result.
pub fn suggest_labels(result: &ExecutionResult, task: &TaskSpec) -> Vec<Suggestion> {
    let mut out: Vec<Suggestion> = Vec::new();
    let mut add = |sub: Subcategory, score: f64, trigger: String| {
        out.push(Suggestion { category: sub.category(), subcategory: sub, score, trigger });
    };
    let methods: BTreeSet<&str> = task.method_names().collect();

    if result.timed_out {
        add(Subcategory::Timeout, 1.0, format!("run exceeded its time limit ({TIME_LIMIT_EXCEEDED})"));
    }
    let mut evidence: Vec<(String, String)> = Vec::new();
    if let Some(c) = &result.collection_error {
        evidence.push((c.exception_type.clone(), c.traceback.clone()));
        if matches!(c.exception_type.as_str(), "SyntaxError" | "IndentationError" | "TabError") {
            add(Subcategory::SyntaxError, 1.0, format!("collection failed with {}", c.exception_type));
        }
    }
    for o in result.failures() {
        if let Some(e) = &o.exception_type {
            evidence.push((e.clone(), o.traceback.clone()));
        }
    }

    for (exc, tb) in &evidence {
        let last = tb.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        match exc.as_str() {
            "NameError" => match NAME_ERROR.captures(last).map(|c| c[1].to_string()) {
                Some(name) if name == task.class_name => {
                    add(Subcategory::MissingClass, 0.9, format!("NameError on the task class `{name}`"))
                }
                Some(name) if methods.contains(name.as_str()) => {
                    add(Subcategory::MissingFunction, 0.8, format!("NameError on skeleton method `{name}`"))
                }
                Some(name) if task.skeleton.contains(&format!("import {name}")) => {
                    add(Subcategory::MissingImport, 0.8, format!("NameError on `{name}`, imported by the skeleton"))
                }
                Some(name) => add(Subcategory::MissingVariable, 0.5, format!("NameError on `{name}`")),
                None => add(Subcategory::MissingVariable, 0.3, "NameError".into()),
            },
            "ImportError" => match CANNOT_IMPORT.captures(last).map(|c| c[1].to_string()) {
                Some(name) if name == task.class_name => {
                    add(Subcategory::RenamedClass, 0.9, format!("candidate does not export `{name}`"))
                }
                Some(name) => add(Subcategory::MissingImport, 0.5, format!("cannot import `{name}`")),
                None => add(Subcategory::MissingImport, 0.3, "ImportError".into()),
            },
            "ModuleNotFoundError" => {
                let module = NO_MODULE.captures(last).map(|c| c[1].to_string()).unwrap_or_default();
                add(Subcategory::UndeclaredDependency, 0.7, format!("module `{module}` is not installed"))
            }
            "AttributeError" => match NO_ATTRIBUTE.captures(last) {
                Some(c) if c[1].starts_with("module") => {
                    add(Subcategory::DeprecatedDependency, 0.5, format!("{} has no attribute `{}`", &c[1], &c[2]))
                }
                Some(c) if methods.contains(&c[2]) => {
                    add(Subcategory::MissingFunction, 0.7, format!("skeleton method `{}` missing on the object", &c[2]))
                }
                Some(c) => add(Subcategory::MissingVariable, 0.6, format!("attribute `{}` missing on the object", &c[2])),
                None => add(Subcategory::MissingVariable, 0.3, "AttributeError".into()),
            },
            "TypeError" if ARG_COUNT.is_match(last) => {
                add(Subcategory::SignatureMismatch, 0.7, format!("call signature mismatch: {}", last.trim()))
            }
            "TypeError" => add(Subcategory::TypeMismatch, 0.4, format!("TypeError: {}", last.trim())),
            "NotImplementedError" => {
                add(Subcategory::IncompleteImplementation, 0.8, "method raises NotImplementedError".into())
            }
            "ValueError" => add(Subcategory::OverrestrictiveValidation, 0.4, "code raised ValueError on test input".into()),
            "KeyError" | "IndexError" | "ZeroDivisionError" => {
                add(Subcategory::WrongEdgeCaseHandling, 0.5, format!("{exc} on test input"))
            }
            "AssertionError" => add(Subcategory::WrongAlgorithm, 0.2, "assertion on returned value failed".into()),
            _ => {}
        }
    }

    // Keep the strongest suggestion per subcategory, best first.
    let mut best: BTreeMap<Subcategory, Suggestion> = BTreeMap::new();
    for s in out {
        match best.get(&s.subcategory) {
            Some(prev) if prev.score >= s.score => {}
            _ => {
                best.insert(s.subcategory, s);
            }
        }
    }
    let mut ranked: Vec<Suggestion> = best.into_values().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.subcategory.cmp(&b.subcategory)));
    ranked
}
