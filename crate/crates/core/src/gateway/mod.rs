//! Model completion providers.
//!
//! Every provider implements [`ModelGateway`]. [`LiveGateway`] speaks the
//! chat-completions wire protocol, [`ReplayGateway`] serves responses from a
//! [`Cassette`], and [`ScriptedGateway`] answers from a closure for tests and
//! fixtures. Wrap any of them in a [`RecordingGateway`] to capture a cassette.

mod cassette;
mod live;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agents::{classify_envelope, GenerationParams, PromptEnvelope, Purpose, TaskKind, TemplateSet};
use crate::corpus::{Corpus, TaskSpec};
use crate::digest;

pub use cassette::{Cassette, CassetteEntry, CassetteMeta, RecordedResponse};
pub use live::{chat_request_body, envelope_from_chat_request, Endpoint, LiveGateway, TokenBucket};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {0}")]
    Status(u16),
    #[error("model returned an empty completion")]
    EmptyCompletion,
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("no cassette entry for request {0}")]
    CassetteMiss(String),
    #[error("corrupt cassette: {0}")]
    CorruptCassette(String),
    #[error("gateway configuration: {0}")]
    Config(String),
    #[error("scripted provider failed: {0}")]
    Scripted(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl GatewayError {
    /// Transport faults, 5xx/429 and empty completions are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::EmptyCompletion => true,
            GatewayError::Status(code) => *code >= 500 || *code == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Live,
    Replay,
    Scripted,
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provider::Live => "live",
            Provider::Replay => "replay",
            Provider::Scripted => "scripted",
        })
    }
}

impl FromStr for Provider {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Provider::Live),
            "replay" => Ok(Provider::Replay),
            "scripted" => Ok(Provider::Scripted),
            other => Err(format!("unknown provider `{other}` (expected live|replay|scripted)")),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
    pub provider: Provider,
}

/// A uniform completion interface. Implementations must be safe to call
/// from several pipeline workers at once.
pub trait ModelGateway: Send + Sync {
    fn complete(
        &self,
        envelope: &PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError>;
}

impl<G: ModelGateway + ?Sized> ModelGateway for Arc<G> {
    fn complete(&self, e: &PromptEnvelope, p: &GenerationParams, m: &str) -> Result<ModelResponse, GatewayError> {
        (**self).complete(e, p, m)
    }
}

impl<G: ModelGateway + ?Sized> ModelGateway for &G {
    fn complete(&self, e: &PromptEnvelope, p: &GenerationParams, m: &str) -> Result<ModelResponse, GatewayError> {
        (**self).complete(e, p, m)
    }
}

/// The request as stored in cassettes and hashed into fingerprints.
pub fn request_value(envelope: &PromptEnvelope, params: &GenerationParams, model_id: &str) -> serde_json::Value {
    json!({ "envelope": envelope, "params": params, "model_id": model_id })
}

/// SHA-256 of the canonical JSON of envelope, params and model id.
pub fn request_fingerprint(envelope: &PromptEnvelope, params: &GenerationParams, model_id: &str) -> String {
    digest::fingerprint(&request_value(envelope, params, model_id)).expect("request serializes")
}

/// Arguments handed to a scripted responder.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedRequest<'a> {
    pub envelope: &'a PromptEnvelope,
    pub params: &'a GenerationParams,
    pub model_id: &'a str,
}

type Responder = dyn Fn(ScriptedRequest<'_>) -> Result<String, String> + Send + Sync;

/// Answers from a pure function of the request.
#[derive(Clone)]
pub struct ScriptedGateway {
    responder: Arc<Responder>,
}

impl fmt::Debug for ScriptedGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedGateway").finish_non_exhaustive()
    }
}

impl ScriptedGateway {
    pub fn new(responder: impl Fn(ScriptedRequest<'_>) -> Result<String, String> + Send + Sync + 'static) -> Self {
        Self { responder: Arc::new(responder) }
    }
}

impl ModelGateway for ScriptedGateway {
    fn complete(
        &self,
        envelope: &PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let text = (self.responder)(ScriptedRequest { envelope, params, model_id })
            .map_err(GatewayError::Scripted)?;
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        Ok(ModelResponse {
            text,
            model_id: model_id.to_string(),
            latency_ms: 0,
            token_usage: None,
            provider: Provider::Scripted,
        })
    }
}

/// Serves recorded responses; never touches the network.
#[derive(Debug)]
pub struct ReplayGateway {
    cassette: Cassette,
    cursors: Mutex<HashMap<String, usize>>,
}

impl ReplayGateway {
    pub fn new(cassette: Cassette) -> Self {
        Self { cassette, cursors: Mutex::new(HashMap::new()) }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        Ok(Self::new(Cassette::load(path)?))
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl ModelGateway for ReplayGateway {
    fn complete(
        &self,
        envelope: &PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let fp = request_fingerprint(envelope, params, model_id);
        let entry = self.cassette.entries.get(&fp).ok_or_else(|| GatewayError::CassetteMiss(fp.clone()))?;
        // The n-th identical request gets the n-th recorded response; extra
        // calls repeat the last one.
        let idx = {
            let mut cursors = self.cursors.lock().expect("cursor lock");
            let c = cursors.entry(fp).or_insert(0);
            let idx = (*c).min(entry.responses.len().saturating_sub(1));
            *c += 1;
            idx
        };
        let rec = entry.responses.get(idx).ok_or_else(|| {
            GatewayError::CorruptCassette(format!("entry {} has no responses", entry.fingerprint))
        })?;
        Ok(ModelResponse {
            text: rec.text.clone(),
            model_id: entry.model_id.clone(),
            latency_ms: rec.latency_ms,
            token_usage: rec.token_usage,
            provider: Provider::Replay,
        })
    }
}

/// Wraps a provider and appends every successful exchange to a cassette.
pub struct RecordingGateway<G> {
    inner: G,
    cassette: Mutex<Cassette>,
}

impl<G: ModelGateway> RecordingGateway<G> {
    pub fn new(inner: G) -> Self {
        Self { inner, cassette: Mutex::new(Cassette::new()) }
    }

    /// Continue recording into an existing cassette.
    pub fn resume(inner: G, cassette: Cassette) -> Self {
        Self { inner, cassette: Mutex::new(cassette) }
    }

    pub fn snapshot(&self) -> Cassette {
        self.cassette.lock().expect("cassette lock").clone()
    }

    /// Persists everything recorded so far.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        self.cassette.lock().expect("cassette lock").save(path)
    }
}

impl<G: ModelGateway> ModelGateway for RecordingGateway<G> {
    fn complete(
        &self,
        envelope: &PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let response = self.inner.complete(envelope, params, model_id)?;
        let request = request_value(envelope, params, model_id);
        let fp = request_fingerprint(envelope, params, model_id);
        self.cassette
            .lock()
            .expect("cassette lock")
            .record(fp, model_id, request, &response);
        Ok(response)
    }
}

/// Runs `attempt` up to `retry_limit + 1` times, sleeping with exponential
/// backoff between retryable failures.
pub fn with_retries<T>(
    retry_limit: u32,
    base_backoff: std::time::Duration,
    mut attempt: impl FnMut() -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let mut tries = 0;
    loop {
        tries += 1;
        match attempt() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() && tries <= retry_limit => {
                let wait = base_backoff.saturating_mul(1 << (tries - 1).min(16));
                tracing::warn!(attempt = tries, "retrying model call after {e}");
                std::thread::sleep(wait);
            }
            Err(e) if e.is_retryable() => {
                return Err(GatewayError::RetriesExhausted { attempts: tries, last: e.to_string() })
            }
            Err(e) => return Err(e),
        }
    }
}

fn task_in<'c>(corpus: &'c Corpus, text: &str) -> Option<&'c TaskSpec> {
    corpus
        .tasks
        .iter()
        .filter(|t| {
            let needle = format!("class {}", t.class_name);
            text.match_indices(&needle).any(|(i, _)| {
                let rest = &text[i + needle.len()..];
                !rest.starts_with(|c: char| c.is_alphanumeric() || c == '_')
            })
        })
        .max_by_key(|t| t.class_name.len())
}

/// A scripted provider that plays every role with reference material: the
/// Developer returns the task's ground truth, the Tester writes a smoke
/// script, reviewers ask for no changes. Used for offline runs.
pub fn oracle_gateway(corpus: Corpus, templates: TemplateSet) -> ScriptedGateway {
    ScriptedGateway::new(move |req| {
        let env = req.envelope;
        let task = task_in(&corpus, &env.context_text);
        let class_name = task.map(|t| t.class_name.as_str()).unwrap_or("");
        let purpose = classify_envelope(&templates, env, class_name)
            .ok_or_else(|| format!("unrecognised prompt: {}", env.role_text))?;
        let need_task = || task.ok_or_else(|| "no task class found in the prompt context".to_string());
        Ok(match purpose {
            Purpose::Review(..) => "No revisions needed.".to_string(),
            Purpose::Produce(TaskKind::WriteRequirements) => {
                let t = need_task()?;
                format!("# Requirements\n\nProvide class {}.\n\n{}", t.class_name, t.description.trim())
            }
            Purpose::Produce(TaskKind::WriteDesign) => {
                let t = need_task()?;
                let methods: Vec<&str> = t.method_names().collect();
                format!("# Design for {}\n\nclass {} with methods: {}", t.class_name, t.class_name, methods.join(", "))
            }
            Purpose::Produce(TaskKind::ImplementCode | TaskKind::FixCode) => {
                format!("```python\n{}\n```", need_task()?.ground_truth.trim_end())
            }
            Purpose::Produce(TaskKind::DesignTests) => {
                let t = need_task()?;
                let lines: Vec<String> = t.method_names().map(|m| format!("- {m}: normal, edge and error inputs")).collect();
                format!("# Test cases for {}\n\n{}", t.class_name, lines.join("\n"))
            }
            Purpose::Produce(TaskKind::WriteTestScript) => {
                // The test cases document carries no class definition, so the
                // name is recovered from its heading.
                let name = env
                    .context_text
                    .lines()
                    .find_map(|l| l.strip_prefix("# Test cases for "))
                    .map(str::trim)
                    .ok_or_else(|| "test cases name no class".to_string())?;
                format!(
                    "```python\nimport unittest\nfrom candidate import {name}\n\n\nclass Test{name}Smoke(unittest.TestCase):\n    def test_defined(self):\n        self.assertTrue(callable({name}))\n```"
                )
            }
            Purpose::Produce(TaskKind::WriteTestReport) => {
                format!("# Test report\n\n{}", env.context_text.trim())
            }
        })
    })
}

pub(crate) fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}
