//! Experiment configuration.
//!
//! ```toml
//! corpus = "corpus"
//! output = "out"
//! models = ["gpt-4o-mini"]
//! variants = ["RawPrompt", "WaterfallFull"]   # default: all five
//! baseline = "RawPrompt"
//! provider = "replay"                         # live | replay | scripted
//! cassette = "cassettes/grid.jsonl"
//! refinement_rounds = 1
//! jobs = 4
//!
//! [params]
//! temperature = 0.8
//! max_output_tokens = 4096
//! retry_limit = 3
//!
//! [execution]
//! runner = "python3 runner/run.py"
//! timeout_s = 480
//! script_timeout_s = 60
//! ```
//!
//! Relative paths resolve against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{GenerationParams, TemplateSet};
use crate::digest;
use crate::exec::{RunnerHandle, DEFAULT_TIMEOUT_S};
use crate::gateway::Provider;
use crate::process::{ProcessVariant, DEFAULT_REFINEMENT_ROUNDS};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    /// Runner command line, e.g. `python3 run.py`.
    #[serde(default)]
    pub runner: Option<String>,
    /// Limit for post-hoc evaluation against benchmark tests.
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Limit for in-pipeline runs of the Tester's script.
    #[serde(default = "default_script_timeout")]
    pub script_timeout_s: f64,
    #[serde(default)]
    pub keep_sandbox: bool,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_S
}
fn default_script_timeout() -> f64 {
    60.0
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self { runner: None, timeout_s: default_timeout(), script_timeout_s: default_script_timeout(), keep_sandbox: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateLimit {
    pub capacity: u32,
    pub per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub corpus: PathBuf,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub models: Vec<String>,
    #[serde(default = "default_variants")]
    pub variants: Vec<ProcessVariant>,
    #[serde(default = "default_baseline")]
    pub baseline: ProcessVariant,
    #[serde(default = "default_provider")]
    pub provider: Provider,
    /// Replay source, or recording target for live runs.
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    /// Directory overriding the built-in prompt templates.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default = "default_rounds")]
    pub refinement_rounds: u32,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default)]
    pub execution: ExecutionConfig,
    #[serde(default)]
    pub rate_limit: Option<RateLimit>,
    /// Static-analysis exports, one `<model>__<variant>.json` per cell.
    #[serde(default)]
    pub quality_dir: Option<PathBuf>,
    /// JSONL annotation file for the taxonomy analysis.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Directory the relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}
fn default_variants() -> Vec<ProcessVariant> {
    ProcessVariant::ALL.to_vec()
}
fn default_baseline() -> ProcessVariant {
    ProcessVariant::RawPrompt
}
fn default_provider() -> Provider {
    Provider::Live
}
fn default_rounds() -> u32 {
    DEFAULT_REFINEMENT_ROUNDS
}
fn default_jobs() -> usize {
    4
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let invalid = |reason: String| ConfigError::Invalid { path: base_dir.to_path_buf(), reason };
        let mut cfg: Config = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate().map_err(invalid)?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        cfg.base_dir = base_dir.to_path_buf();
        resolve(&mut cfg.corpus);
        resolve(&mut cfg.output);
        for p in [&mut cfg.cassette, &mut cfg.templates, &mut cfg.quality_dir, &mut cfg.labels].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let base = std::path::absolute(&base).unwrap_or(base);
        Self::parse(&text, &base).map_err(|e| match e {
            ConfigError::Invalid { reason, .. } => ConfigError::Invalid { path: path.to_path_buf(), reason },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.models.is_empty() {
            return Err("`models` must list at least one model".into());
        }
        if self.variants.is_empty() {
            return Err("`variants` must list at least one process variant".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if m.trim().is_empty() || !seen.insert(m) {
                return Err(format!("model id `{m}` is empty or repeated"));
            }
        }
        if !self.variants.contains(&self.baseline) {
            return Err(format!("baseline {} is not among the variants", self.baseline));
        }
        if self.jobs == 0 {
            return Err("`jobs` must be at least 1".into());
        }
        if !(self.execution.timeout_s > 0.0 && self.execution.script_timeout_s > 0.0) {
            return Err("timeouts must be positive".into());
        }
        if self.provider == Provider::Replay && self.cassette.is_none() {
            return Err("provider `replay` needs `cassette`".into());
        }
        self.params.validate().map_err(|e| e.to_string())
    }

    pub fn template_set(&self) -> Result<TemplateSet, String> {
        match &self.templates {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| e.to_string()),
            None => Ok(TemplateSet::defaults()),
        }
    }

    /// The configured runner, with a relative program path taken from the
    /// config directory when such a file exists there.
    pub fn runner(&self) -> Option<Result<RunnerHandle, String>> {
        let cmd = self.execution.runner.as_deref()?;
        Some(RunnerHandle::parse(cmd).map_err(|e| e.to_string()).map(|h| h.resolve_in(&self.base_dir)))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output.join("runs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.output.join("reports")
    }

    /// Fingerprint of every setting that shapes generated runs, plus the
    /// prompt templates in effect. Pure execution knobs (`jobs`, timeouts,
    /// sandbox retention, output location) are left out so a grid can be
    /// resumed with different parallelism.
    pub fn digest(&self, templates: &TemplateSet) -> String {
        let shaping = serde_json::json!({
            "corpus": self.corpus,
            "models": self.models,
            "variants": self.variants,
            "baseline": self.baseline,
            "provider": self.provider,
            "cassette": self.cassette,
            "refinement_rounds": self.refinement_rounds,
            "params": self.params,
            "script_timeout_s": self.execution.script_timeout_s,
            "runner": self.execution.runner,
            "templates": templates.digest(),
        });
        digest::fingerprint(&shaping).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "corpus = \"c\"\nmodels = [\"m1\"]\n";

    #[test]
    fn defaults_and_paths() {
        let cfg = Config::parse(MIN, Path::new("/exp")).unwrap();
        assert_eq!(cfg.corpus, PathBuf::from("/exp/c"));
        assert_eq!(cfg.output, PathBuf::from("/exp/out"));
        assert_eq!(cfg.variants.len(), 5);
        assert_eq!(cfg.params.temperature, 0.8);
        assert_eq!(cfg.execution.timeout_s, 480.0);
        assert_eq!(cfg.refinement_rounds, 1);
    }

    #[test]
    fn variants_accept_slugs() {
        let cfg = Config::parse(&format!("{MIN}variants = [\"raw\", \"Waterfall_Full\"]\n"), Path::new("/")).unwrap();
        assert_eq!(cfg.variants, [ProcessVariant::RawPrompt, ProcessVariant::WaterfallFull]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(Config::parse("corpus = \"c\"\nmodels = []\n", Path::new("/")).is_err());
        assert!(Config::parse(&format!("{MIN}bogus = 1\n"), Path::new("/")).is_err());
        assert!(Config::parse(&format!("{MIN}variants = [\"WaterfallFull\"]\n"), Path::new("/")).is_err());
        assert!(Config::parse(&format!("{MIN}provider = \"replay\"\n"), Path::new("/")).is_err());
        assert!(Config::parse(&format!("{MIN}[params]\ntemperature = 3.0\n"), Path::new("/")).is_err());
    }

    #[test]
    fn digest_tracks_shaping_inputs_only() {
        let t = TemplateSet::defaults();
        let a = Config::parse(MIN, Path::new("/x")).unwrap();
        let mut b = a.clone();
        b.jobs = 16;
        assert_eq!(a.digest(&t), b.digest(&t));
        b.params.temperature = 0.2;
        assert_ne!(a.digest(&t), b.digest(&t));
        let mut c = a.clone();
        c.refinement_rounds = 2;
        assert_ne!(a.digest(&t), c.digest(&t));
        assert_ne!(a.digest(&t), a.digest(&t.clone().with_language("Java")));
    }
}
