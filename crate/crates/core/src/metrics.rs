//! Correctness and code-quality metrics.
//!
//! - Pass@k at class and function level.
//! - ncLOC: physical lines that are neither blank, comment-only nor part of
//!   a documentation string.
//! - Issue density: issues per 10 ncLOC for each Software-Quality and
//!   Clean-Code category, from an imported static-analysis export.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::CLASS_SENTINEL;
use crate::exec::{ExecutionResult, TestStatus};
use crate::pysrc::{self, LineKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("malformed issue export {location}: {reason}")]
    MalformedIssueExport { location: String, reason: String },
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassAtKInput {
    pub n: u64,
    pub c: u64,
    pub k: u64,
}

impl PassAtKInput {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.c > self.n {
            return Err(MetricsError::Domain(format!("c={} exceeds n={}", self.c, self.n)));
        }
        if self.k < 1 || self.k > self.n {
            return Err(MetricsError::Domain(format!("k={} must be in 1..={}", self.k, self.n)));
        }
        Ok(())
    }
}

/// `1 - C(n-c, k) / C(n, k)` as the product `prod_{i<k} (n-c-i)/(n-i)`.
pub fn pass_at_k(input: PassAtKInput) -> Result<f64, MetricsError> {
    input.validate()?;
    let PassAtKInput { n, c, k } = input;
    if n - c < k {
        return Ok(1.0);
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut miss = 1.0f64;
    for i in 0..k {
        miss *= (n - c - i) as f64 / (n - i) as f64;
    }
    Ok((1.0 - miss).clamp(0.0, 1.0))
}

/// Mean Pass@k over tasks, each given as `(n, c)`.
pub fn corpus_pass_at_k(samples: &[(u64, u64)], k: u64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Domain("no tasks".into()));
    }
    let mut sum = 0.0;
    for &(n, c) in samples {
        sum += pass_at_k(PassAtKInput { n, c, k })?;
    }
    Ok(sum / samples.len() as f64)
}

/// Every test passed, nothing failed to collect, and the run finished in time.
pub fn class_correct(eval: &ExecutionResult) -> bool {
    eval.all_passed()
}

/// Per-group pass flags. A group passes when it has at least one outcome
/// and all of them passed.
fn group_flags(eval: &ExecutionResult) -> BTreeMap<&str, bool> {
    let mut flags: BTreeMap<&str, bool> = BTreeMap::new();
    for o in &eval.per_test {
        let f = flags.entry(o.group.as_str()).or_insert(true);
        *f &= o.status == TestStatus::Pass;
    }
    flags
}

/// Correctness of each method that has at least one mapped test group.
/// Groups mapped to the whole-class sentinel are ignored here.
pub fn function_flags(eval: &ExecutionResult, test_map: &BTreeMap<String, String>) -> BTreeMap<String, bool> {
    let groups = group_flags(eval);
    let mut out: BTreeMap<String, bool> = BTreeMap::new();
    for (group, method) in test_map {
        if method == CLASS_SENTINEL {
            continue;
        }
        let passed = groups.get(group.as_str()).copied().unwrap_or(false);
        *out.entry(method.clone()).or_insert(true) &= passed;
    }
    out
}

/// Fraction of correct methods in one task, or `None` when no method has
/// mapped tests.
pub fn function_pass1(eval: &ExecutionResult, test_map: &BTreeMap<String, String>) -> Option<f64> {
    let flags = function_flags(eval, test_map);
    if flags.is_empty() {
        return None;
    }
    Some(flags.values().filter(|&&b| b).count() as f64 / flags.len() as f64)
}

/// Running totals over (task, method) pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionTally {
    pub correct: u64,
    pub total: u64,
}

impl FunctionTally {
    pub fn add(&mut self, flags: &BTreeMap<String, bool>) {
        self.total += flags.len() as u64;
        self.correct += flags.values().filter(|&&b| b).count() as u64;
    }

    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Non-comment lines of code. Documentation strings count as comments.
pub fn count_ncloc(source: &str) -> usize {
    pysrc::classify(source).iter().filter(|l| l.kind == LineKind::Code).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SoftwareQuality {
    Security,
    Reliability,
    Maintainability,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CleanCodeAttribute {
    Consistency,
    Intentionality,
    Adaptability,
    Responsibility,
}

/// The seven density columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IssueCategory {
    Security,
    Reliability,
    Maintainability,
    Consistency,
    Intentionality,
    Adaptability,
    Responsibility,
}

impl IssueCategory {
    pub const ALL: [IssueCategory; 7] = [
        IssueCategory::Security,
        IssueCategory::Reliability,
        IssueCategory::Maintainability,
        IssueCategory::Consistency,
        IssueCategory::Intentionality,
        IssueCategory::Adaptability,
        IssueCategory::Responsibility,
    ];
    pub const SOFTWARE_QUALITY: [IssueCategory; 3] =
        [IssueCategory::Security, IssueCategory::Reliability, IssueCategory::Maintainability];
    pub const CLEAN_CODE: [IssueCategory; 4] = [
        IssueCategory::Consistency,
        IssueCategory::Intentionality,
        IssueCategory::Adaptability,
        IssueCategory::Responsibility,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IssueCategory::Security => "Security",
            IssueCategory::Reliability => "Reliability",
            IssueCategory::Maintainability => "Maintainability",
            IssueCategory::Consistency => "Consistency",
            IssueCategory::Intentionality => "Intentionality",
            IssueCategory::Adaptability => "Adaptability",
            IssueCategory::Responsibility => "Responsibility",
        }
    }
}

impl fmt::Display for IssueCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<SoftwareQuality> for IssueCategory {
    fn from(q: SoftwareQuality) -> Self {
        match q {
            SoftwareQuality::Security => IssueCategory::Security,
            SoftwareQuality::Reliability => IssueCategory::Reliability,
            SoftwareQuality::Maintainability => IssueCategory::Maintainability,
        }
    }
}

impl From<CleanCodeAttribute> for IssueCategory {
    fn from(a: CleanCodeAttribute) -> Self {
        match a {
            CleanCodeAttribute::Consistency => IssueCategory::Consistency,
            CleanCodeAttribute::Intentionality => IssueCategory::Intentionality,
            CleanCodeAttribute::Adaptability => IssueCategory::Adaptability,
            CleanCodeAttribute::Responsibility => IssueCategory::Responsibility,
        }
    }
}

impl FromStr for SoftwareQuality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "SECURITY" => Ok(SoftwareQuality::Security),
            "RELIABILITY" => Ok(SoftwareQuality::Reliability),
            "MAINTAINABILITY" => Ok(SoftwareQuality::Maintainability),
            _ => Err(format!("unknown software quality `{s}`")),
        }
    }
}

impl FromStr for CleanCodeAttribute {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        // The analyzer exports adjectives; nouns are accepted too.
        match s.to_ascii_uppercase().as_str() {
            "CONSISTENT" | "CONSISTENCY" => Ok(CleanCodeAttribute::Consistency),
            "INTENTIONAL" | "INTENTIONALITY" => Ok(CleanCodeAttribute::Intentionality),
            "ADAPTABLE" | "ADAPTABILITY" => Ok(CleanCodeAttribute::Adaptability),
            "RESPONSIBLE" | "RESPONSIBILITY" => Ok(CleanCodeAttribute::Responsibility),
            _ => Err(format!("unknown clean code attribute `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityIssue {
    pub rule_id: String,
    pub software_quality: Option<SoftwareQuality>,
    pub clean_code_attribute: Option<CleanCodeAttribute>,
    pub file: String,
    pub line: Option<u32>,
}

impl QualityIssue {
    pub fn categories(&self) -> impl Iterator<Item = IssueCategory> {
        self.software_quality
            .map(IssueCategory::from)
            .into_iter()
            .chain(self.clean_code_attribute.map(IssueCategory::from))
    }
}

/// Issues per 10 ncLOC for every category; categories without issues are 0.
pub fn issue_density(issues: &[QualityIssue], total_ncloc: u64) -> Result<BTreeMap<IssueCategory, f64>, MetricsError> {
    if total_ncloc == 0 {
        return Err(MetricsError::Domain("total ncLOC must be positive".into()));
    }
    let mut counts: BTreeMap<IssueCategory, u64> = IssueCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for issue in issues {
        for c in issue.categories() {
            *counts.get_mut(&c).expect("all categories present") += 1;
        }
    }
    Ok(counts.into_iter().map(|(c, n)| (c, n as f64 * 10.0 / total_ncloc as f64)).collect())
}

/// A parsed analyzer export.
#[derive(Debug, Clone, PartialEq)]
pub struct IssueExport {
    pub issues: Vec<QualityIssue>,
    /// ncLOC as reported by the analyzer, when present.
    pub ncloc: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub issues: Vec<QualityIssue>,
    pub total_ncloc: u64,
    pub densities: BTreeMap<IssueCategory, f64>,
}

impl QualityReport {
    /// Densities over `total_ncloc`, counted natively. A differing figure in
    /// the export is logged and otherwise ignored.
    pub fn build(export: IssueExport, total_ncloc: u64) -> Result<Self, MetricsError> {
        if let Some(reported) = export.ncloc.filter(|r| *r != total_ncloc) {
            tracing::warn!(reported, counted = total_ncloc, "export ncLOC differs from the native count");
        }
        let densities = issue_density(&export.issues, total_ncloc)?;
        Ok(QualityReport { issues: export.issues, total_ncloc, densities })
    }
}

fn issue_from_value(idx: usize, v: &Value) -> Result<QualityIssue, MetricsError> {
    let line = v.get("line").and_then(Value::as_u64).map(|l| l as u32);
    let rule = v.get("rule").and_then(Value::as_str).unwrap_or("").to_string();
    let location = format!(
        "issue #{} (rule `{}`, {}{})",
        idx + 1,
        rule,
        v.get("component").and_then(Value::as_str).unwrap_or("?"),
        line.map(|l| format!(":{l}")).unwrap_or_default()
    );
    let bad = |reason: String| MetricsError::MalformedIssueExport { location: location.clone(), reason };
    if rule.is_empty() {
        return Err(bad("missing `rule`".into()));
    }
    let software_quality = match v.get("impacts").and_then(Value::as_array).and_then(|a| a.first()) {
        Some(impact) => {
            let q = impact
                .get("softwareQuality")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("impact without `softwareQuality`".into()))?;
            Some(q.parse::<SoftwareQuality>().map_err(bad)?)
        }
        None => None,
    };
    let clean_code_attribute = match v.get("cleanCodeAttributeCategory").and_then(Value::as_str) {
        Some(a) => Some(a.parse::<CleanCodeAttribute>().map_err(bad)?),
        None => None,
    };
    if software_quality.is_none() && clean_code_attribute.is_none() {
        return Err(bad("neither a software quality nor a clean code attribute".into()));
    }
    let component = v.get("component").and_then(Value::as_str).unwrap_or_default();
    // `project:path/to/file.py` -> `path/to/file.py`
    let file = component.split_once(':').map_or(component, |(_, f)| f).to_string();
    Ok(QualityIssue { rule_id: rule, software_quality, clean_code_attribute, file, line })
}

/// Parses an export document (see `docs/quality-export.md`).
pub fn parse_issue_export(text: &str) -> Result<IssueExport, MetricsError> {
    let root: Value = serde_json::from_str(text).map_err(|e| MetricsError::MalformedIssueExport {
        location: format!("line {}, column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let items = root.get("issues").and_then(Value::as_array).ok_or_else(|| MetricsError::MalformedIssueExport {
        location: "document root".into(),
        reason: "missing `issues` array".into(),
    })?;
    let issues = items.iter().enumerate().map(|(i, v)| issue_from_value(i, v)).collect::<Result<Vec<_>, _>>()?;
    if let Some(total) = root.get("total").and_then(Value::as_u64) {
        if total != issues.len() as u64 {
            tracing::warn!(total, parsed = issues.len(), "export `total` differs from the issues it lists");
        }
    }
    let ncloc = root.get("ncloc").and_then(Value::as_u64);
    Ok(IssueExport { issues, ncloc })
}

pub fn import_issue_report(path: impl AsRef<Path>) -> Result<IssueExport, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MetricsError::Io(format!("{}: {e}", path.display())))?;
    parse_issue_export(&text)
}

/// Percent change from `baseline` to `value`, rounded half away from zero.
/// `None` when the baseline is zero.
pub fn relative_change(value: f64, baseline: f64) -> Option<i64> {
    if baseline == 0.0 || !baseline.is_finite() || !value.is_finite() {
        return None;
    }
    let pct = (value - baseline) / baseline * 100.0;
    // Snap away binary noise so exact halves (e.g. 62.5) round as written.
    let snapped = (pct * 1e6).round() / 1e6;
    Some(snapped.round() as i64)
}

/// `+49%`, `-40%`, `0%`.
pub fn format_percent(pct: i64) -> String {
    if pct > 0 {
        format!("+{pct}%")
    } else {
        format!("{pct}%")
    }
}

/// One row of the comparison report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model_id: String,
    pub variant: String,
    /// Samples per task.
    pub n: u64,
    pub class_pass1: f64,
    pub function_pass1: Option<f64>,
    pub densities: BTreeMap<IssueCategory, f64>,
    /// Runs aggregated into this row.
    pub run_ids: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(n: u64, c: u64, k: u64) -> f64 {
        pass_at_k(PassAtKInput { n, c, k }).unwrap()
    }

    #[test]
    fn pass_at_k_examples() {
        assert_eq!(p(1, 1, 1), 1.0);
        assert!((p(5, 2, 1) - 0.4).abs() < 1e-12);
        assert!((p(10, 3, 5) - 11.0 / 12.0).abs() < 1e-12);
        assert!(pass_at_k(PassAtKInput { n: 3, c: 4, k: 1 }).is_err());
        assert!(pass_at_k(PassAtKInput { n: 3, c: 1, k: 0 }).is_err());
        assert!(pass_at_k(PassAtKInput { n: 3, c: 1, k: 4 }).is_err());
    }

    proptest! {
        #[test]
        fn monotone_in_c_and_k(n in 1u64..40, c in 0u64..40, k in 1u64..40) {
            prop_assume!(c <= n && k <= n);
            let v = p(n, c, k);
            prop_assert!((0.0..=1.0).contains(&v));
            if c < n { prop_assert!(p(n, c + 1, k) >= v); }
            if k < n { prop_assert!(p(n, c, k + 1) >= v); }
            prop_assert_eq!(p(n, n, k), 1.0);
            prop_assert_eq!(p(n, 0, k), 0.0);
        }

        #[test]
        fn density_scale_invariant(count in 0usize..50, ncloc in 1u64..5000) {
            let issues: Vec<QualityIssue> = (0..count).map(|i| QualityIssue {
                rule_id: format!("r{i}"),
                software_quality: Some(SoftwareQuality::Maintainability),
                clean_code_attribute: None,
                file: "a.py".into(),
                line: None,
            }).collect();
            let doubled: Vec<QualityIssue> = issues.iter().chain(issues.iter()).cloned().collect();
            let a = issue_density(&issues, ncloc).unwrap()[&IssueCategory::Maintainability];
            let b = issue_density(&doubled, ncloc * 2).unwrap()[&IssueCategory::Maintainability];
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ncloc_rule() {
        let src = "import os\n\n# comment\nclass A:\n    \"\"\"Doc\n    more doc.\n    \"\"\"\n\n    x = 1  # trailing\n    def f(self): return 1\n";
        // 10 lines: 2 blank, 1 comment, 3 doc -> 4 code
        assert_eq!(src.lines().count(), 10);
        assert_eq!(count_ncloc(src), 4);
        assert_eq!(count_ncloc(""), 0);
        assert_eq!(count_ncloc("x = 1  # note"), 1);
    }

    #[test]
    fn relative_change_rounding() {
        assert_eq!(relative_change(0.21, 0.35), Some(-40));
        assert_eq!(relative_change(122.0, 82.0), Some(49));
        assert_eq!(relative_change(13.0, 8.0), Some(63));
        assert_eq!(relative_change(2.0, 50.0), Some(-96));
        assert_eq!(relative_change(5.0, 5.0), Some(0));
        assert_eq!(relative_change(2.0, 0.0), None);
        assert_eq!(format_percent(-40), "-40%");
        assert_eq!(format_percent(49), "+49%");
        assert_eq!(format_percent(0), "0%");
    }

    #[test]
    fn export_rejections() {
        let neither = r#"{"issues":[{"rule":"python:S1","component":"p:a.py","line":3}]}"#;
        let err = parse_issue_export(neither).unwrap_err();
        assert!(matches!(&err, MetricsError::MalformedIssueExport { location, .. } if location.contains("a.py:3")));
        let unknown = r#"{"issues":[{"rule":"x","component":"p:a.py","impacts":[{"softwareQuality":"SPEED"}]}]}"#;
        assert!(parse_issue_export(unknown).is_err());
        assert!(parse_issue_export("{\n  \"issues\": [,]\n}").is_err());
    }
}
