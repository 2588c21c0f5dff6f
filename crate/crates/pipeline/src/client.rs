//! Clients for OpenAI-compatible embedding and chat-completion endpoints.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::JudgeCache;
use crate::error::{PipelineError, Result};

pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_BACKOFF_MS: u64 = 250;

/// One external model service. `base_url` is the API root, e.g.
/// `http://host:8000/v1`; `/chat/completions` or `/embeddings` is appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_env: Option<String>,
}

fn default_timeout() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn default_backoff() -> u64 {
    DEFAULT_BACKOFF_MS
}

impl Endpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Endpoint {
            name: name.into(),
            base_url: base_url.into(),
            model_id: model_id.into(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_ms: DEFAULT_BACKOFF_MS,
            token_env: None,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn token(&self) -> Result<Option<String>> {
        match &self.token_env {
            None => Ok(None),
            Some(var) => std::env::var(var).map(Some).map_err(|_| {
                PipelineError::Config(format!(
                    "{}: environment variable {var} is not set",
                    self.name
                ))
            }),
        }
    }
}

/// Process-wide HTTP client: building one loads the system trust store, and a
/// shared client pools connections across judges. Timeouts are set per request.
fn shared_http() -> reqwest::Client {
    static CLIENT: OnceLock<reqwest::Client> = OnceLock::new();
    CLIENT.get_or_init(reqwest::Client::new).clone()
}

/// Retryable outcome of one HTTP attempt.
enum Attempt {
    Retry(String),
    Fatal(PipelineError),
}

/// POSTs `body` and returns the JSON response, retrying transport errors,
/// timeouts, 429 and 5xx with exponential backoff.
async fn post_json(http: &reqwest::Client, ep: &Endpoint, path: &str, body: &Value) -> Result<Value> {
    let token = ep.token()?;
    let url = ep.url(path);
    let attempts = ep.max_retries + 1;
    let mut last = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let delay = ep.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
            tokio::time::sleep(Duration::from_millis(delay)).await;
        }
        let mut req = http
            .post(&url)
            .timeout(Duration::from_millis(ep.timeout_ms))
            .json(body);
        if let Some(t) = &token {
            req = req.bearer_auth(t);
        }
        let outcome = match req.send().await {
            Err(e) => Attempt::Retry(e.to_string()),
            Ok(resp) => {
                let status = resp.status();
                if status.is_success() {
                    match resp.json::<Value>().await {
                        Ok(v) => return Ok(v),
                        Err(e) => Attempt::Retry(format!("reading body: {e}")),
                    }
                } else {
                    let text = resp.text().await.unwrap_or_default();
                    if status.is_server_error() || status.as_u16() == 429 {
                        Attempt::Retry(format!("HTTP {}: {text}", status.as_u16()))
                    } else {
                        Attempt::Fatal(PipelineError::Status {
                            endpoint: ep.name.clone(),
                            status: status.as_u16(),
                            body: text,
                        })
                    }
                }
            }
        };
        match outcome {
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retry(msg) => {
                log::debug!("{}: attempt {} failed: {msg}", ep.name, attempt + 1);
                last = msg;
            }
        }
    }
    Err(PipelineError::Transport {
        endpoint: ep.name.clone(),
        attempts,
        message: last,
    })
}

fn malformed(ep: &Endpoint, message: impl Into<String>) -> PipelineError {
    PipelineError::MalformedResponse {
        endpoint: ep.name.clone(),
        message: message.into(),
    }
}

/// Text encoder with an in-memory cache; identical text is embedded once.
#[derive(Debug)]
pub struct EmbeddingClient {
    endpoint: Endpoint,
    dim: usize,
    http: reqwest::Client,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    calls: AtomicUsize,
}

impl EmbeddingClient {
    pub fn new(endpoint: Endpoint, dim: usize) -> Self {
        EmbeddingClient {
            endpoint,
            dim,
            http: shared_http(),
            cache: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of embedding requests that reached the network (retries excluded).
    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub async fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(PipelineError::EmptyField("text"));
        }
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = json!({ "model": self.endpoint.model_id, "input": text });
        let resp = post_json(&self.http, &self.endpoint, "embeddings", &body).await?;
        let raw = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed(&self.endpoint, "missing data[0].embedding"))?;
        let v: Vec<f64> = raw
            .iter()
            .map(|x| x.as_f64().filter(|f| f.is_finite()))
            .collect::<Option<_>>()
            .ok_or_else(|| malformed(&self.endpoint, "embedding contains a non-number"))?;
        if v.len() != self.dim {
            return Err(PipelineError::DimensionMismatch {
                endpoint: self.endpoint.name.clone(),
                expected: self.dim,
                actual: v.len(),
            });
        }
        self.cache
            .lock()
            .unwrap()
            .insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Maps a reply to a vote from its first alphabetic token: `yes` is 1, `no` is 0.
pub fn parse_vote(reply: &str) -> Result<u8> {
    let token: String = reply
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match token.as_str() {
        "yes" => Ok(1),
        "no" => Ok(0),
        _ => Err(PipelineError::Parse {
            raw: reply.to_string(),
        }),
    }
}

/// A chat-completion judge sharing a reply cache with the other judges.
#[derive(Debug)]
pub struct JudgeClient {
    endpoint: Endpoint,
    http: reqwest::Client,
    cache: Arc<JudgeCache>,
    calls: AtomicUsize,
}

impl JudgeClient {
    pub fn new(endpoint: Endpoint, cache: Arc<JudgeCache>) -> Self {
        JudgeClient {
            endpoint,
            http: shared_http(),
            cache,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn network_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Raw reply text for `prompt`, from the cache when possible.
    pub async fn reply(&self, prompt: &str) -> Result<String> {
        if let Some(r) = self.cache.get(&self.endpoint.model_id, prompt) {
            return Ok(r);
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let body = json!({
            "model": self.endpoint.model_id,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": 0,
        });
        let resp = post_json(&self.http, &self.endpoint, "chat/completions", &body).await?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed(&self.endpoint, "missing choices[0].message.content"))?
            .to_string();
        self.cache.insert(&self.endpoint.model_id, prompt, &text)?;
        Ok(text)
    }

    /// Binary vote for `prompt`; unparseable replies surface as [`PipelineError::Parse`].
    pub async fn judge(&self, prompt: &str) -> Result<u8> {
        parse_vote(&self.reply(prompt).await?)
    }
}
