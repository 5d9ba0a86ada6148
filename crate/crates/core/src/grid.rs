//! Experiment grids: the run manifest, resumable execution and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{extract_errors, ErrorRecord, RunKey};
use crate::corpus::{payload_hash, Corpus};
use crate::digest;
use crate::exec::{evaluate_final_code, EvalRecord, ExecError, RunnerHandle};
use crate::gateway::Provider;
use crate::metrics::class_correct;
use crate::process::{
    ablation_grid, build_pipeline, load_run, persist_run, PersistError, Pipeline, ProcessVariant, RunDescriptor,
    RunRecord, RunStatus, RUN_LOG,
};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },
    #[error("existing manifest does not match this configuration ({0}); use a fresh output directory or discard it")]
    ManifestMismatch(String),
    #[error("run {run_id}: task `{task_id}` is not in the corpus")]
    UnknownTask { run_id: String, task_id: String },
    #[error("run {run_id}: {source}")]
    Persist { run_id: String, source: PersistError },
    #[error("run {run_id}: {source}")]
    Exec { run_id: String, source: ExecError },
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellStatus {
    Pending,
    Completed,
    GatewayFailed,
    Unparseable,
}

impl From<RunStatus> for CellStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Completed => CellStatus::Completed,
            RunStatus::GatewayFailed => CellStatus::GatewayFailed,
            RunStatus::Unparseable => CellStatus::Unparseable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub descriptor: RunDescriptor,
    pub status: CellStatus,
}

/// Everything needed to resume a grid: which configuration produced it and
/// where each cell stands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub corpus_fingerprint: String,
    pub provider: Provider,
    pub entries: Vec<ManifestEntry>,
}

/// The corpus fingerprint recorded in manifests: the file-level digest when
/// the corpus came from disk, otherwise a digest of the in-memory tasks.
pub fn corpus_fingerprint(corpus: &Corpus) -> String {
    if !corpus.fingerprint.is_empty() {
        return corpus.fingerprint.clone();
    }
    let parts: Vec<(&str, String, String)> = corpus
        .tasks
        .iter()
        .map(|t| (t.task_id.as_str(), payload_hash(t), digest::sha256_hex(&t.test_suite)))
        .collect();
    digest::fingerprint(&parts).expect("corpus fingerprint serializes")
}

impl RunManifest {
    pub fn new(
        config_digest: impl Into<String>,
        corpus: &Corpus,
        provider: Provider,
        models: &[String],
        variants: &[ProcessVariant],
    ) -> Self {
        let entries = ablation_grid(models, variants, corpus)
            .into_iter()
            .map(|descriptor| ManifestEntry { descriptor, status: CellStatus::Pending })
            .collect();
        RunManifest {
            config_digest: config_digest.into(),
            corpus_fingerprint: corpus_fingerprint(corpus),
            provider,
            entries,
        }
    }

    pub fn path(output: &Path) -> PathBuf {
        output.join(MANIFEST_FILE)
    }

    pub fn load(output: &Path) -> Result<Self, GridError> {
        let path = Self::path(output);
        let text = fs::read_to_string(&path).map_err(|source| GridError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| GridError::MalformedManifest { path, reason: e.to_string() })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, output: &Path) -> Result<(), GridError> {
        fs::create_dir_all(output).map_err(|source| GridError::Io { path: output.to_path_buf(), source })?;
        let path = Self::path(output);
        let tmp = output.join(format!("{MANIFEST_FILE}.partial"));
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&tmp, text).map_err(|source| GridError::Io { path: tmp.clone(), source })?;
        fs::rename(&tmp, &path).map_err(|source| GridError::Io { path, source })
    }

    /// Loads the manifest under `output` when it exists and matches `fresh`,
    /// otherwise starts from `fresh`. A mismatching manifest is an error so
    /// that runs from different configurations never mix.
    pub fn open_or_create(output: &Path, fresh: RunManifest) -> Result<Self, GridError> {
        if !Self::path(output).exists() {
            return Ok(fresh);
        }
        let existing = Self::load(output)?;
        let mut diffs = Vec::new();
        if existing.config_digest != fresh.config_digest {
            diffs.push("configuration digest");
        }
        if existing.corpus_fingerprint != fresh.corpus_fingerprint {
            diffs.push("corpus fingerprint");
        }
        if existing.provider != fresh.provider {
            diffs.push("provider");
        }
        let ids = |m: &RunManifest| m.entries.iter().map(|e| e.descriptor.clone()).collect::<Vec<_>>();
        if ids(&existing) != ids(&fresh) {
            diffs.push("grid cells");
        }
        if diffs.is_empty() {
            Ok(existing)
        } else {
            Err(GridError::ManifestMismatch(diffs.join(", ")))
        }
    }

    /// Indices of cells still to run: pending or gateway-failed cells, and
    /// any cell whose run log is missing. Unparseable cells are final.
    pub fn pending(&self, runs_dir: &Path) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                matches!(e.status, CellStatus::Pending | CellStatus::GatewayFailed)
                    || !runs_dir.join(&e.descriptor.run_id).join(RUN_LOG).is_file()
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn status_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(format!("{:?}", e.status)).or_default() += 1;
        }
        out
    }

    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(|e| e.status == CellStatus::Completed)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridSummary {
    /// Run ids executed this session, in grid order.
    pub executed: Vec<String>,
    /// Cells left untouched because they were already done.
    pub skipped: usize,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool, GridError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| GridError::Pool(e.to_string()))
}

/// Runs every pending cell of `manifest` with at most `jobs` cells in
/// flight. Each finished record is persisted under `runs_dir`, the manifest
/// is saved under `output` and then `on_cell` is called (e.g. to flush a
/// recording cassette). Cells already in flight finish; the first
/// persistence error is returned afterwards.
#[allow(clippy::too_many_arguments)]
pub fn run_grid(
    manifest: &mut RunManifest,
    corpus: &Corpus,
    pipeline: &Pipeline<'_>,
    output: &Path,
    runs_dir: &Path,
    source_ext: &str,
    jobs: usize,
    on_cell: &(dyn Fn(&RunRecord) + Sync),
) -> Result<GridSummary, GridError> {
    let todo = manifest.pending(runs_dir);
    for &i in &todo {
        let d = &manifest.entries[i].descriptor;
        if corpus.get(&d.task_id).is_none() {
            return Err(GridError::UnknownTask { run_id: d.run_id.clone(), task_id: d.task_id.clone() });
        }
    }
    let skipped = manifest.entries.len() - todo.len();
    let descriptors: Vec<(usize, RunDescriptor)> =
        todo.iter().map(|&i| (i, manifest.entries[i].descriptor.clone())).collect();
    manifest.save(output)?;
    let shared = Mutex::new(&mut *manifest);
    let results: Vec<Result<String, GridError>> = pool(jobs)?.install(|| {
        descriptors
            .par_iter()
            .map(|(i, d)| {
                let task = corpus.get(&d.task_id).expect("checked above");
                let rec = pipeline.run(task, &build_pipeline(d.variant), d);
                persist_run(runs_dir, &rec, source_ext)
                    .map_err(|source| GridError::Persist { run_id: d.run_id.clone(), source })?;
                {
                    let mut m = shared.lock().expect("manifest lock");
                    m.entries[*i].status = rec.status.into();
                    m.save(output)?;
                }
                on_cell(&rec);
                tracing::info!(run_id = %d.run_id, status = %rec.status, "cell finished");
                Ok(d.run_id.clone())
            })
            .collect()
    });
    let mut executed = Vec::new();
    for r in results {
        executed.push(r?);
    }
    Ok(GridSummary { executed, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub timeout_s: f64,
    pub keep_sandbox: bool,
    pub jobs: usize,
    /// Re-score runs that already have an `eval.json`.
    pub force: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { timeout_s: crate::exec::DEFAULT_TIMEOUT_S, keep_sandbox: false, jobs: 4, force: false }
    }
}

/// Scores every persisted run in the manifest against its benchmark tests
/// and writes `eval.json` next to the run log. Runs that already have an
/// evaluation are kept unless `force` is set. Returns the records in grid
/// order together with per-run failures.
pub fn evaluate_grid(
    manifest: &RunManifest,
    corpus: &Corpus,
    runs_dir: &Path,
    runner: &RunnerHandle,
    opts: &EvalOptions,
) -> Result<(Vec<EvalRecord>, Vec<GridError>), GridError> {
    let EvalOptions { timeout_s, keep_sandbox, jobs, force } = *opts;
    let outcomes: Vec<Option<Result<EvalRecord, GridError>>> = pool(jobs)?.install(|| {
        manifest
            .entries
            .par_iter()
            .map(|e| {
                let d = &e.descriptor;
                let dir = runs_dir.join(&d.run_id);
                if !dir.join(RUN_LOG).is_file() {
                    return None;
                }
                if !force && EvalRecord::path(&dir).is_file() {
                    return Some(
                        EvalRecord::load(&dir).map_err(|source| GridError::Exec { run_id: d.run_id.clone(), source }),
                    );
                }
                let Some(task) = corpus.get(&d.task_id) else {
                    return Some(Err(GridError::UnknownTask { run_id: d.run_id.clone(), task_id: d.task_id.clone() }));
                };
                Some(
                    load_run(&dir)
                        .map_err(|source| GridError::Persist { run_id: d.run_id.clone(), source })
                        .and_then(|rec| {
                            evaluate_final_code(&rec, task, runner, timeout_s, keep_sandbox, Some(&dir))
                                .map_err(|source| GridError::Exec { run_id: d.run_id.clone(), source })
                        }),
                )
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failures.push(e),
        }
    }
    Ok((records, failures))
}

/// Reads every `runs/*/eval.json`, sorted by run id.
pub fn load_evaluations(runs_dir: &Path) -> Result<Vec<EvalRecord>, GridError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(runs_dir).map_err(|source| GridError::Io { path: runs_dir.to_path_buf(), source })?;
    for entry in entries {
        let dir = entry.map_err(|source| GridError::Io { path: runs_dir.to_path_buf(), source })?.path();
        if EvalRecord::path(&dir).is_file() {
            let rec = EvalRecord::load(&dir)
                .map_err(|source| GridError::Exec { run_id: dir.display().to_string(), source })?;
            out.push(rec);
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

/// Reads every persisted run log, sorted by run id.
pub fn load_runs(runs_dir: &Path) -> Result<Vec<RunRecord>, GridError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(runs_dir).map_err(|source| GridError::Io { path: runs_dir.to_path_buf(), source })?;
    for entry in entries {
        let dir = entry.map_err(|source| GridError::Io { path: runs_dir.to_path_buf(), source })?.path();
        if dir.join(RUN_LOG).is_file() {
            let rec = load_run(&dir)
                .map_err(|source| GridError::Persist { run_id: dir.display().to_string(), source })?;
            out.push(rec);
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

pub fn eval_key(e: &EvalRecord) -> Option<RunKey> {
    let variant = e.variant.parse().ok()?;
    Some(RunKey::new(e.task_id.clone(), variant, e.model_id.clone()))
}

/// Error records of every evaluated run.
pub fn error_records(evals: &[EvalRecord]) -> Vec<ErrorRecord> {
    evals
        .iter()
        .filter_map(|e| Some((eval_key(e)?, e.evaluation.result()?)))
        .flat_map(|(key, result)| extract_errors(result, &key))
        .collect()
}

/// Runs whose generated class is not correct, including runs that could not
/// be evaluated.
pub fn failing_runs(evals: &[EvalRecord]) -> BTreeSet<RunKey> {
    evals
        .iter()
        .filter(|e| !e.evaluation.result().is_some_and(class_correct))
        .filter_map(eval_key)
        .collect()
}
