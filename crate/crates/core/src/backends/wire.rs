//! OpenAI-compatible chat-completions client with retry and usage accounting.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatCall, ChatReply, TransportStatus, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the first retry; doubles per retry up to `max_backoff_ms`.
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 1000,
            max_backoff_ms: 4000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WireConfig {
    /// Server root; the client posts to `{base_url}/v1/chat/completions`.
    /// Falls back to `$base_url_env` when empty.
    pub base_url: String,
    pub base_url_env: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    /// Extra request fields passed through verbatim (for example a
    /// provider's reasoning-effort setting).
    pub extra: BTreeMap<String, Value>,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            base_url: String::new(),
            base_url_env: "OPENAI_BASE_URL".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            model: String::new(),
            timeout_secs: 600,
            retry: RetryPolicy::default(),
            extra: BTreeMap::new(),
        }
    }
}

pub struct WireBackend {
    config: WireConfig,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl WireBackend {
    pub fn new(config: WireConfig) -> Result<Self, BackendError> {
        let base = if config.base_url.is_empty() {
            std::env::var(&config.base_url_env).map_err(|_| {
                BackendError::fatal(format!("no base_url configured and ${} is unset", config.base_url_env))
            })?
        } else {
            config.base_url.clone()
        };
        let endpoint = format!("{}/v1/chat/completions", base.trim_end_matches('/').trim_end_matches("/v1"));
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::fatal(format!("building HTTP client: {e}")))?;
        Ok(Self {
            config,
            endpoint,
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request_body(&self, call: &ChatCall) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": call.prompt}],
            "temperature": call.decoding.temperature,
            "top_p": call.decoding.top_p,
        });
        let obj = body.as_object_mut().expect("object literal");
        if let Some(max) = call.decoding.max_tokens {
            obj.insert("max_tokens".into(), json!(max));
        }
        for (k, v) in &self.config.extra {
            obj.insert(k.clone(), v.clone());
        }
        body
    }

    fn attempt(&self, call: &ChatCall) -> Result<ChatReply, BackendError> {
        let started = Instant::now();
        let mut request = self.client.post(&self.endpoint).json(&self.request_body(call));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError {
            status: if e.is_timeout() || e.is_connect() {
                TransportStatus::RetriableError
            } else {
                TransportStatus::FatalError
            },
            message: e.to_string(),
            attempts: 1,
        })?;
        let status = response.status();
        let body = response.text().map_err(|e| BackendError {
            status: TransportStatus::RetriableError,
            message: format!("reading response body: {e}"),
            attempts: 1,
        })?;
        if !status.is_success() {
            let retriable = status.as_u16() == 429 || status.as_u16() == 408 || status.is_server_error();
            return Err(BackendError {
                status: if retriable {
                    TransportStatus::RetriableError
                } else {
                    TransportStatus::FatalError
                },
                message: format!("HTTP {status}: {}", truncate(&body, 300)),
                attempts: 1,
            });
        }
        let (text, usage) = parse_completion(&body, &call.prompt)?;
        Ok(ChatReply {
            text,
            usage,
            latency_ms: started.elapsed().as_millis() as u64,
            attempts: 1,
        })
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Extracts the first choice's content and the reported usage. Missing usage
/// is estimated from character counts and flagged.
pub fn parse_completion(body: &str, prompt: &str) -> Result<(String, Usage), BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::fatal(format!("response is not JSON: {e}")))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::fatal("response has no choices[0].message.content"))?
        .to_string();
    let reported = value.get("usage").and_then(|u| {
        Some(Usage {
            input_tokens: u.get("prompt_tokens")?.as_u64()?,
            output_tokens: u.get("completion_tokens")?.as_u64()?,
            estimated: false,
        })
    });
    let usage = reported.unwrap_or_else(|| Usage::estimate(prompt, &text));
    Ok((text, usage))
}

impl ChatBackend for WireBackend {
    fn call(&self, call: &ChatCall) -> Result<ChatReply, BackendError> {
        let max_attempts = self.config.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.attempt(call) {
                Ok(mut reply) => {
                    reply.attempts = attempt;
                    return Ok(reply);
                }
                Err(mut err) => {
                    err.attempts = attempt;
                    if err.status != TransportStatus::RetriableError || attempt >= max_attempts {
                        if err.status == TransportStatus::RetriableError {
                            err.status = TransportStatus::FatalError;
                        }
                        return Err(err);
                    }
                    log::warn!(
                        "{:?} call for {} failed (attempt {attempt}): {}",
                        call.role,
                        call.meta.problem_id,
                        err.message
                    );
                    std::thread::sleep(self.config.retry.backoff(attempt - 1));
                    attempt += 1;
                }
            }
        }
    }
}
