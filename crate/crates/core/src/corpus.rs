//! Benchmark task loading and validation.
//!
//! A corpus is a directory with one sub-directory per task:
//!
//! ```text
//! <corpus>/<task>/skeleton.py      class skeleton given to the model
//! <corpus>/<task>/description.md   natural-language task text
//! <corpus>/<task>/solution.py      reference implementation
//! <corpus>/<task>/tests.py         unittest suite
//! <corpus>/<task>/task.json        optional metadata record
//! ```
//!
//! Files are matched by stem, so the extension follows the corpus language.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::digest::sha256_hex;
use crate::pysrc;

/// Test-map value for groups that exercise the class as a whole.
pub const CLASS_SENTINEL: &str = "class";

const SOURCE_EXT: &str = "py";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{task_id}: missing field `{field}`")]
    MissingField { task_id: String, field: String },
    #[error("duplicate task id `{0}`")]
    DuplicateTaskId(String),
    #[error("{task_id}: unparsable skeleton: {reason}")]
    UnparsableSkeleton { task_id: String, reason: String },
    #[error("{task_id}: invalid metadata: {reason}")]
    InvalidMetadata { task_id: String, reason: String },
    #[error("{task_id}: test group `{group}` matches several methods: {methods:?}")]
    AmbiguousMapping { task_id: String, group: String, methods: Vec<String> },
    #[error("{task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },
}

impl CorpusError {
    fn io(path: &Path, err: std::io::Error) -> Self {
        CorpusError::Io { path: path.to_path_buf(), message: err.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDescriptor {
    pub name: String,
    pub signature: String,
    #[serde(default)]
    pub doc: String,
}

/// One class-level benchmark task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub class_name: String,
    pub skeleton: String,
    pub description: String,
    pub methods: Vec<MethodDescriptor>,
    pub ground_truth: String,
    pub test_suite: String,
    /// Test group name -> method name, or [`CLASS_SENTINEL`].
    pub test_map: BTreeMap<String, String>,
    pub test_count: usize,
}

impl TaskSpec {
    pub fn method_names(&self) -> impl Iterator<Item = &str> {
        self.methods.iter().map(|m| m.name.as_str())
    }

    /// Test groups mapped to `method`.
    pub fn groups_for(&self, method: &str) -> Vec<&str> {
        self.test_map
            .iter()
            .filter(|(_, m)| m.as_str() == method)
            .map(|(g, _)| g.as_str())
            .collect()
    }
}

/// Optional per-task metadata record (`task.json`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    methods: Option<Vec<MethodDescriptor>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_map: Option<BTreeMap<String, String>>,
}

/// A task directory that failed validation during a lenient load.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub task_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub tasks: Vec<TaskSpec>,
    pub source_path: PathBuf,
    /// SHA-256 over every file of every task directory, in sorted order.
    pub fingerprint: String,
    #[serde(default)]
    pub rejected: Vec<Rejection>,
}

impl Corpus {
    /// Loads every task under `path`, skipping (and logging) tasks that fail
    /// validation. Only an unreadable corpus root is an error.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let dirs = task_dirs(path)?;
        let fingerprint = fingerprint_dirs(&dirs)?;

        let mut tasks: Vec<TaskSpec> = Vec::new();
        let mut seen = BTreeSet::new();
        let mut rejected = Vec::new();
        for dir in &dirs {
            match load_task(dir) {
                Ok(task) if !seen.insert(task.task_id.clone()) => {
                    let err = CorpusError::DuplicateTaskId(task.task_id.clone());
                    warn!(task = %task.task_id, "skipping task: {err}");
                    rejected.push(Rejection { task_id: task.task_id, reason: err.to_string() });
                }
                Ok(task) => tasks.push(task),
                Err(err) => {
                    let task_id = dir_task_id(dir);
                    warn!(task = %task_id, "skipping task: {err}");
                    rejected.push(Rejection { task_id, reason: err.to_string() });
                }
            }
        }
        Ok(Corpus { tasks, source_path: path.to_path_buf(), fingerprint, rejected })
    }

    /// Like [`Corpus::load`] but fails on the first invalid task.
    pub fn load_strict(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let dirs = task_dirs(path)?;
        let fingerprint = fingerprint_dirs(&dirs)?;
        let mut tasks: Vec<TaskSpec> = Vec::new();
        let mut seen = BTreeSet::new();
        for dir in &dirs {
            let task = load_task(dir)?;
            if !seen.insert(task.task_id.clone()) {
                return Err(CorpusError::DuplicateTaskId(task.task_id));
            }
            tasks.push(task);
        }
        Ok(Corpus { tasks, source_path: path.to_path_buf(), fingerprint, rejected: Vec::new() })
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Mean number of test cases per task.
    pub fn mean_test_count(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        let total: usize = self.tasks.iter().map(|t| t.test_count).sum();
        total as f64 / self.tasks.len() as f64
    }

    /// Writes the corpus back out in the on-disk layout, metadata included.
    pub fn write_dir(&self, dest: impl AsRef<Path>) -> Result<(), CorpusError> {
        let dest = dest.as_ref();
        for task in &self.tasks {
            let dir = dest.join(&task.task_id);
            fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
            let files = [
                (format!("skeleton.{SOURCE_EXT}"), task.skeleton.clone()),
                ("description.md".to_string(), task.description.clone()),
                (format!("solution.{SOURCE_EXT}"), task.ground_truth.clone()),
                (format!("tests.{SOURCE_EXT}"), task.test_suite.clone()),
            ];
            for (name, body) in files {
                let p = dir.join(name);
                fs::write(&p, body).map_err(|e| CorpusError::io(&p, e))?;
            }
            let meta = TaskMeta {
                task_id: Some(task.task_id.clone()),
                class_name: Some(task.class_name.clone()),
                methods: Some(task.methods.clone()),
                test_map: Some(task.test_map.clone()),
            };
            let p = dir.join("task.json");
            let body = serde_json::to_string_pretty(&meta).expect("metadata serializes");
            fs::write(&p, body).map_err(|e| CorpusError::io(&p, e))?;
        }
        Ok(())
    }
}

/// Per-task validation outcome, one entry per task directory, for `corpus lint`.
pub type LintReport = Vec<(String, Result<(), CorpusError>)>;

pub fn lint(path: impl AsRef<Path>) -> Result<LintReport, CorpusError> {
    let dirs = task_dirs(path.as_ref())?;
    let mut seen = BTreeSet::new();
    Ok(dirs
        .iter()
        .map(|dir| match load_task(dir) {
            Ok(task) if !seen.insert(task.task_id.clone()) => {
                (task.task_id.clone(), Err(CorpusError::DuplicateTaskId(task.task_id)))
            }
            Ok(task) => (task.task_id, Ok(())),
            Err(e) => (dir_task_id(dir), Err(e)),
        })
        .collect())
}

/// Formats lint results as `<task_id> OK|<error>` lines.
pub fn format_lint(results: &[(String, Result<(), CorpusError>)]) -> String {
    results
        .iter()
        .map(|(id, r)| match r {
            Ok(()) => format!("{id} OK\n"),
            Err(e) => format!("{id} {e}\n"),
        })
        .collect()
}

fn dir_task_id(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn task_dirs(root: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    let entries = fs::read_dir(root).map_err(|e| CorpusError::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CorpusError::io(root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}

fn fingerprint_dirs(dirs: &[PathBuf]) -> Result<String, CorpusError> {
    let mut buf = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CorpusError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let bytes = fs::read(&file).map_err(|e| CorpusError::io(&file, e))?;
            let rel = format!("{}/{}", dir_task_id(dir), dir_task_id(&file));
            buf.extend_from_slice(rel.as_bytes());
            buf.push(0);
            buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            buf.extend_from_slice(&bytes);
        }
    }
    Ok(sha256_hex(buf))
}

/// Reads the file in `dir` whose stem is `stem`, if any.
fn read_by_stem(dir: &Path, stem: &str) -> Result<Option<String>, CorpusError> {
    let mut candidates: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CorpusError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_stem().is_some_and(|s| s == stem))
        .collect();
    candidates.sort();
    match candidates.first() {
        Some(p) => fs::read_to_string(p).map(Some).map_err(|e| CorpusError::io(p, e)),
        None => Ok(None),
    }
}

/// Loads and validates one task directory.
pub fn load_task(dir: &Path) -> Result<TaskSpec, CorpusError> {
    let meta_path = dir.join("task.json");
    let dir_id = dir_task_id(dir);
    let meta: TaskMeta = if meta_path.is_file() {
        let body = fs::read_to_string(&meta_path).map_err(|e| CorpusError::io(&meta_path, e))?;
        serde_json::from_str(&body).map_err(|e| CorpusError::InvalidMetadata {
            task_id: dir_id.clone(),
            reason: e.to_string(),
        })?
    } else {
        TaskMeta::default()
    };
    let task_id = meta.task_id.clone().unwrap_or(dir_id);

    let required = |stem: &str, field: &str| -> Result<String, CorpusError> {
        match read_by_stem(dir, stem)? {
            Some(body) if !body.trim().is_empty() => Ok(body),
            _ => Err(CorpusError::MissingField { task_id: task_id.clone(), field: field.into() }),
        }
    };
    let skeleton = required("skeleton", "skeleton")?;
    let description = required("description", "description")?;
    let ground_truth = required("solution", "ground_truth")?;
    let test_suite = required("tests", "test_suite")?;

    let classes = pysrc::top_level_classes(&skeleton);
    let class_name = match classes.as_slice() {
        [one] => one.name.clone(),
        [] => {
            return Err(CorpusError::UnparsableSkeleton {
                task_id,
                reason: "no class definition".into(),
            })
        }
        many => {
            return Err(CorpusError::UnparsableSkeleton {
                task_id,
                reason: format!("{} class definitions, expected one", many.len()),
            })
        }
    };
    if let Some(declared) = &meta.class_name {
        if declared != &class_name {
            return Err(CorpusError::InvalidMetadata {
                task_id,
                reason: format!("class_name `{declared}` but skeleton defines `{class_name}`"),
            });
        }
    }

    let skeleton_methods = pysrc::methods_of(&skeleton, &class_name);
    let methods = match meta.methods {
        Some(m) => m,
        None => skeleton_methods
            .iter()
            .filter(|m| !(m.name.starts_with("__") && m.name.ends_with("__")))
            .map(|m| MethodDescriptor {
                name: m.name.clone(),
                signature: m.signature.clone(),
                doc: m.doc.clone(),
            })
            .collect(),
    };
    let mut names = BTreeSet::new();
    for m in &methods {
        if !names.insert(m.name.as_str()) {
            return Err(CorpusError::InvalidTask {
                task_id,
                reason: format!("method `{}` declared twice", m.name),
            });
        }
        if !skeleton_methods.iter().any(|s| s.name == m.name) {
            return Err(CorpusError::InvalidTask {
                task_id,
                reason: format!("method `{}` does not appear in the skeleton", m.name),
            });
        }
    }

    let groups = pysrc::test_groups(&test_suite);
    if groups.is_empty() {
        return Err(CorpusError::InvalidTask { task_id, reason: "test suite has no test groups".into() });
    }
    let test_count = groups.iter().map(|g| g.cases.len()).sum();

    let mut task = TaskSpec {
        task_id,
        class_name,
        skeleton,
        description,
        methods,
        ground_truth,
        test_suite,
        test_map: BTreeMap::new(),
        test_count,
    };
    task.test_map = match meta.test_map {
        Some(map) => map,
        None => map_tests_to_methods(&task)?,
    };
    validate_test_map(&task, &groups)?;
    Ok(task)
}

fn validate_test_map(task: &TaskSpec, groups: &[pysrc::TestGroup]) -> Result<(), CorpusError> {
    for g in groups {
        if !task.test_map.contains_key(&g.name) {
            return Err(CorpusError::InvalidTask {
                task_id: task.task_id.clone(),
                reason: format!("test group `{}` is not mapped", g.name),
            });
        }
    }
    for (group, method) in &task.test_map {
        if method != CLASS_SENTINEL && !task.method_names().any(|m| m == method) {
            return Err(CorpusError::InvalidTask {
                task_id: task.task_id.clone(),
                reason: format!("test group `{group}` maps to unknown method `{method}`"),
            });
        }
    }
    Ok(())
}

fn normalize(name: &str) -> String {
    name.chars().filter(|c| *c != '_').flat_map(char::to_lowercase).collect()
}

/// Assigns every test group of `task` to a method by the
/// `Test<ClassName><MethodName>` naming convention (the
/// `<ClassName>Test<MethodName>` ordering is accepted too). Matching ignores
/// case and underscores; when several method names prefix the remainder the
/// longest wins. Groups that name no method map to [`CLASS_SENTINEL`].
pub fn map_tests_to_methods(task: &TaskSpec) -> Result<BTreeMap<String, String>, CorpusError> {
    let class = normalize(&task.class_name);
    let prefixes = [format!("test{class}"), format!("{class}test")];
    let methods: Vec<(String, &str)> =
        task.methods.iter().map(|m| (normalize(&m.name), m.name.as_str())).collect();

    let mut map = BTreeMap::new();
    for group in pysrc::test_groups(&task.test_suite) {
        let norm = normalize(&group.name);
        let rest = prefixes.iter().find_map(|p| norm.strip_prefix(p.as_str()));
        let target = match rest {
            None | Some("") => CLASS_SENTINEL.to_string(),
            Some(rest) => {
                let best_len = methods
                    .iter()
                    .filter(|(n, _)| !n.is_empty() && rest.starts_with(n.as_str()))
                    .map(|(n, _)| n.len())
                    .max();
                match best_len {
                    None => CLASS_SENTINEL.to_string(),
                    Some(len) => {
                        let hits: Vec<&str> = methods
                            .iter()
                            .filter(|(n, _)| n.len() == len && rest.starts_with(n.as_str()))
                            .map(|(_, orig)| *orig)
                            .collect();
                        if hits.len() > 1 {
                            return Err(CorpusError::AmbiguousMapping {
                                task_id: task.task_id.clone(),
                                group: group.name,
                                methods: hits.into_iter().map(String::from).collect(),
                            });
                        }
                        hits[0].to_string()
                    }
                }
            }
        };
        map.insert(group.name, target);
    }
    Ok(map)
}

/// The RawPrompt input: skeleton then description, verbatim.
pub fn baseline_prompt_payload(task: &TaskSpec) -> String {
    let mut payload = String::with_capacity(task.skeleton.len() + task.description.len() + 2);
    payload.push_str(&task.skeleton);
    if !task.skeleton.ends_with('\n') {
        payload.push('\n');
    }
    payload.push('\n');
    payload.push_str(&task.description);
    payload
}

pub fn payload_hash(task: &TaskSpec) -> String {
    sha256_hex(baseline_prompt_payload(task))
}
