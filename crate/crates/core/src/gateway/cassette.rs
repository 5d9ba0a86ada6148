//! Persisted request/response recordings.
//!
//! On disk a cassette is line-delimited JSON: one `header` line, one `entry`
//! line per fingerprint (sorted), and a final `digest` line holding the
//! SHA-256 of every byte before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{GatewayError, ModelResponse, TokenUsage};
use crate::digest::sha256_hex;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteMeta {
    pub format_version: u32,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub model_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub text: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub model_id: String,
    /// Envelope, params and model id exactly as hashed.
    pub request: serde_json::Value,
    /// Number of times this request was issued while recording.
    pub hits: u32,
    /// One response per hit, in call order.
    pub responses: Vec<RecordedResponse>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cassette {
    pub meta: CassetteMeta,
    pub entries: BTreeMap<String, CassetteEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(CassetteMeta),
    Entry(CassetteEntry),
    Digest { sha256: String },
}

impl Default for Cassette {
    fn default() -> Self {
        Self::new()
    }
}

impl Cassette {
    pub fn new() -> Self {
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Cassette {
            meta: CassetteMeta { format_version: FORMAT_VERSION, created_at, model_ids: Vec::new() },
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total exchanges recorded, counting repeats.
    pub fn total_hits(&self) -> u64 {
        self.entries.values().map(|e| u64::from(e.hits)).sum()
    }

    pub fn record(
        &mut self,
        fingerprint: String,
        model_id: &str,
        request: serde_json::Value,
        response: &ModelResponse,
    ) {
        if !self.meta.model_ids.iter().any(|m| m == model_id) {
            self.meta.model_ids.push(model_id.to_string());
            self.meta.model_ids.sort();
        }
        let rec = RecordedResponse {
            text: response.text.clone(),
            latency_ms: response.latency_ms,
            token_usage: response.token_usage,
        };
        let entry = self.entries.entry(fingerprint.clone()).or_insert_with(|| CassetteEntry {
            fingerprint,
            model_id: model_id.to_string(),
            request,
            hits: 0,
            responses: Vec::new(),
        });
        entry.hits += 1;
        entry.responses.push(rec);
    }

    /// Merges `other` into `self`; entries already present keep their responses.
    pub fn merge(&mut self, other: Cassette) {
        for m in other.meta.model_ids {
            if !self.meta.model_ids.contains(&m) {
                self.meta.model_ids.push(m);
            }
        }
        self.meta.model_ids.sort();
        for (fp, entry) in other.entries {
            self.entries.entry(fp).or_insert(entry);
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut body = String::new();
        let push = |body: &mut String, line: &Line| {
            body.push_str(&serde_json::to_string(line).expect("cassette line serializes"));
            body.push('\n');
        };
        push(&mut body, &Line::Header(self.meta.clone()));
        for entry in self.entries.values() {
            push(&mut body, &Line::Entry(entry.clone()));
        }
        let digest = sha256_hex(body.as_bytes());
        push(&mut body, &Line::Digest { sha256: digest });
        body
    }

    pub fn from_jsonl(text: &str) -> Result<Self, GatewayError> {
        let corrupt = |m: String| GatewayError::CorruptCassette(m);
        let trimmed = text.strip_suffix('\n').ok_or_else(|| corrupt("missing trailing newline".into()))?;
        let (body_len, digest_line) = match trimmed.rfind('\n') {
            Some(i) => (i + 1, &trimmed[i + 1..]),
            None => return Err(corrupt("no digest line".into())),
        };
        let expected = match serde_json::from_str::<Line>(digest_line) {
            Ok(Line::Digest { sha256 }) => sha256,
            _ => return Err(corrupt("last line is not an integrity digest".into())),
        };
        let body = &text[..body_len];
        if sha256_hex(body.as_bytes()) != expected {
            return Err(corrupt("integrity digest mismatch".into()));
        }

        let mut meta = None;
        let mut entries = BTreeMap::new();
        for (n, line) in body.lines().enumerate() {
            let parsed: Line = serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
            match parsed {
                Line::Header(h) if n == 0 => meta = Some(h),
                Line::Entry(e) if n > 0 => {
                    if e.responses.is_empty() {
                        return Err(corrupt(format!("line {}: entry without responses", n + 1)));
                    }
                    if entries.insert(e.fingerprint.clone(), e).is_some() {
                        return Err(corrupt(format!("line {}: duplicate fingerprint", n + 1)));
                    }
                }
                _ => return Err(corrupt(format!("line {}: unexpected record", n + 1))),
            }
        }
        let meta = meta.ok_or_else(|| corrupt("missing header".into()))?;
        Ok(Cassette { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GatewayError> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }
}
