//! Chat-completions HTTP provider.

use std::env;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{elapsed_ms, with_retries, GatewayError, ModelGateway, ModelResponse, Provider, TokenUsage};
use crate::agents::{GenerationParams, PromptEnvelope};

/// Where and how to reach one model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub base_url: String,
    pub api_key: Option<String>,
}

/// `gpt-4o-mini` -> `GPT_4O_MINI`.
fn model_key(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

fn first_env(names: &[String]) -> Option<String> {
    names.iter().find_map(|n| env::var(n).ok().filter(|v| !v.trim().is_empty()))
}

impl Endpoint {
    /// Resolves the endpoint for `model_id` from the environment. Lookup order:
    /// `WFEVAL_API_BASE_<MODEL>`, `WFEVAL_API_BASE`, `OPENAI_BASE_URL` (and the
    /// matching `*_API_KEY` variables).
    pub fn from_env(model_id: &str) -> Result<Self, GatewayError> {
        let key = model_key(model_id);
        let base_url = first_env(&[
            format!("WFEVAL_API_BASE_{key}"),
            "WFEVAL_API_BASE".into(),
            "OPENAI_BASE_URL".into(),
        ])
        .ok_or_else(|| GatewayError::Config(format!("no API base configured for model `{model_id}` (set WFEVAL_API_BASE_{key})")))?;
        let api_key = first_env(&[
            format!("WFEVAL_API_KEY_{key}"),
            "WFEVAL_API_KEY".into(),
            "OPENAI_API_KEY".into(),
        ]);
        Ok(Endpoint { base_url: base_url.trim_end_matches('/').to_string(), api_key })
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// The system message carries the role frame, the user message carries the
/// whole five-field envelope as JSON.
pub fn chat_request_body(envelope: &PromptEnvelope, params: &GenerationParams, model_id: &str) -> Value {
    let mut body = json!({
        "model": model_id,
        "messages": [
            {"role": "system", "content": envelope.role_text},
            {"role": "user", "content": envelope.to_json()},
        ],
        "temperature": params.temperature,
        "max_tokens": params.max_output_tokens,
    });
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Recovers the envelope from a body built by [`chat_request_body`].
pub fn envelope_from_chat_request(body: &Value) -> Option<PromptEnvelope> {
    let messages = body.get("messages")?.as_array()?;
    let user = messages.iter().find(|m| m.get("role").and_then(Value::as_str) == Some("user"))?;
    PromptEnvelope::parse(user.get("content")?.as_str()?).ok()
}

/// A blocking token bucket shared by all workers hitting one endpoint.
#[derive(Debug)]
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(capacity: u32, per_second: f64) -> Self {
        let capacity = f64::from(capacity.max(1));
        Self { capacity, per_second: per_second.max(1e-6), state: Mutex::new((capacity, Instant::now())) }
    }

    /// Blocks until one token is available and takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.per_second;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct LiveGateway {
    agent: ureq::Agent,
    endpoint_override: Option<Endpoint>,
    limiter: Option<Arc<TokenBucket>>,
    backoff: Duration,
}

impl LiveGateway {
    /// Endpoints are resolved per model from the environment.
    pub fn from_env(request_timeout: Duration) -> Self {
        Self::build(None, request_timeout)
    }

    /// Sends every model to the same endpoint.
    pub fn with_endpoint(endpoint: Endpoint, request_timeout: Duration) -> Self {
        Self::build(Some(endpoint), request_timeout)
    }

    fn build(endpoint_override: Option<Endpoint>, request_timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(request_timeout))
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
            endpoint_override,
            limiter: None,
            backoff: Duration::from_millis(500),
        }
    }

    pub fn with_rate_limit(mut self, limiter: Arc<TokenBucket>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn endpoint(&self, model_id: &str) -> Result<Endpoint, GatewayError> {
        match &self.endpoint_override {
            Some(e) => Ok(e.clone()),
            None => Endpoint::from_env(model_id),
        }
    }

    fn attempt(&self, endpoint: &Endpoint, body: &Value) -> Result<(String, Option<TokenUsage>), GatewayError> {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.agent.post(&endpoint.completions_url()).header("content-type", "application/json");
        if let Some(key) = &endpoint.api_key {
            req = req.header("authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status(status));
        }
        let payload: Value = resp.body_mut().read_json().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let text = payload
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        let usage = payload.get("usage").map(|u| TokenUsage {
            prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64),
            output_tokens: u.get("completion_tokens").and_then(Value::as_u64),
        });
        Ok((text, usage))
    }
}

impl ModelGateway for LiveGateway {
    fn complete(
        &self,
        envelope: &PromptEnvelope,
        params: &GenerationParams,
        model_id: &str,
    ) -> Result<ModelResponse, GatewayError> {
        let endpoint = self.endpoint(model_id)?;
        let body = chat_request_body(envelope, params, model_id);
        let start = Instant::now();
        let (text, token_usage) = with_retries(params.retry_limit, self.backoff, || self.attempt(&endpoint, &body))?;
        Ok(ModelResponse {
            text,
            model_id: model_id.to_string(),
            latency_ms: elapsed_ms(start),
            token_usage,
            provider: Provider::Live,
        })
    }
}
