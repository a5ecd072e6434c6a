//! Language-model providers behind one completion interface.
//!
//! - [`ScriptedOracle`] replays canned responses in order (tests, replay).
//! - [`RecordingProxy`] wraps any provider and persists every exchange in the
//!   script file format, so a recorded session can be replayed verbatim.
//! - [`HttpModel`] talks to a JSON-over-HTTP completion endpoint.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::sha256_hex;

pub const ENV_ENDPOINT: &str = "AGENT_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "AGENT_LLM_API_KEY";

pub const DEFAULT_DEADLINE: Duration = Duration::from_secs(120);
pub const DEFAULT_MAX_OUTPUT_CHARS: usize = 4_000;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("completion deadline of {0:?} exceeded")]
    Timeout(Duration),
    #[error("endpoint returned status {status}: {body}")]
    EndpointError { status: u16, body: String },
    #[error("script exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("prompt digest mismatch at script index {index}: expected {expected}, got {actual}")]
    PromptDigestMismatch { index: usize, expected: String, actual: String },
    #[error("malformed script: {0}")]
    MalformedScript(String),
    #[error("invalid completion request: {0}")]
    InvalidRequest(&'static str),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("missing environment variable {0}")]
    MissingEnv(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_output_chars: usize,
    pub temperature: f64,
    pub deadline: Duration,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_output_chars: DEFAULT_MAX_OUTPUT_CHARS,
            temperature: 0.0,
            deadline: DEFAULT_DEADLINE,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("prompt must not be empty"));
        }
        if self.deadline.is_zero() {
            return Err(GatewayError::InvalidRequest("deadline must be positive"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0"));
        }
        Ok(())
    }
}

#[async_trait]
pub trait LanguageModel: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

#[async_trait]
impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request).await
    }
}

#[async_trait]
impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(request).await
    }
}

/// Validates `request` and runs it under its deadline.
pub async fn complete<M: LanguageModel + ?Sized>(
    model: &M,
    request: &CompletionRequest,
) -> Result<String, GatewayError> {
    request.validate()?;
    match tokio::time::timeout(request.deadline, model.complete(request)).await {
        Ok(result) => result,
        Err(_) => Err(GatewayError::Timeout(request.deadline)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub index: usize,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
}

/// Responses consumed strictly in index order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleScript {
    entries: Vec<ScriptEntry>,
}

impl OracleScript {
    /// Script from plain responses, no digests.
    pub fn from_responses<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            entries: responses
                .into_iter()
                .enumerate()
                .map(|(index, r)| ScriptEntry { index, response: r.into(), prompt_sha256: None })
                .collect(),
        }
    }

    /// Entries may appear in any order but their indices must be exactly `0..n`.
    pub fn from_entries(mut entries: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        entries.sort_by_key(|e| e.index);
        for pair in entries.windows(2) {
            if pair[0].index == pair[1].index {
                return Err(GatewayError::MalformedScript(format!(
                    "duplicate index {}",
                    pair[0].index
                )));
            }
        }
        for (expected, entry) in entries.iter().enumerate() {
            if entry.index != expected {
                return Err(GatewayError::MalformedScript(format!(
                    "indices must run 0..{} without gaps, missing {expected}",
                    entries.len()
                )));
            }
            if let Some(d) = &entry.prompt_sha256 {
                if d.len() != 64 || !d.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(GatewayError::MalformedScript(format!(
                        "index {}: prompt_sha256 is not a hex SHA-256 digest",
                        entry.index
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(text).map_err(|e| GatewayError::MalformedScript(e.to_string()))?;
        Self::from_entries(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("script entries serialize")
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_script(path: impl AsRef<Path>) -> Result<OracleScript, GatewayError> {
    OracleScript::from_json(&std::fs::read_to_string(path)?)
}

/// Deterministic provider: call `k` returns script entry `k`.
#[derive(Debug)]
pub struct ScriptedOracle {
    script: OracleScript,
    calls: Mutex<usize>,
}

impl ScriptedOracle {
    pub fn new(script: OracleScript) -> Self {
        Self { script, calls: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }

    fn next(&self, prompt: &str) -> Result<String, GatewayError> {
        let mut calls = self.calls.lock().unwrap();
        let index = *calls;
        let entry = self
            .script
            .entries
            .get(index)
            .ok_or(GatewayError::ScriptExhausted { calls: index })?;
        *calls += 1;
        if let Some(expected) = &entry.prompt_sha256 {
            let actual = sha256_hex(prompt);
            if !expected.eq_ignore_ascii_case(&actual) {
                return Err(GatewayError::PromptDigestMismatch {
                    index,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(entry.response.clone())
    }
}

#[async_trait]
impl LanguageModel for ScriptedOracle {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.next(&request.prompt)
    }
}

/// Forwards to `inner` and rewrites `path` with every successful exchange.
#[derive(Debug)]
pub struct RecordingProxy<M> {
    inner: M,
    path: PathBuf,
    records: Mutex<Vec<ScriptEntry>>,
}

impl<M: LanguageModel> RecordingProxy<M> {
    pub fn new(inner: M, path: impl Into<PathBuf>) -> Self {
        Self { inner, path: path.into(), records: Mutex::new(Vec::new()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> Vec<ScriptEntry> {
        self.records.lock().unwrap().clone()
    }

    fn persist(&self, records: &[ScriptEntry]) -> Result<(), GatewayError> {
        let tmp = self.path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(records).expect("entries serialize"))?;
        std::fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[async_trait]
impl<M: LanguageModel> LanguageModel for RecordingProxy<M> {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let response = self.inner.complete(request).await?;
        let mut records = self.records.lock().unwrap();
        let index = records.len();
        records.push(ScriptEntry {
            index,
            response: response.clone(),
            prompt_sha256: Some(sha256_hex(&request.prompt)),
        });
        self.persist(&records)?;
        Ok(response)
    }
}

/// Wire shape of the HTTP endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointShape {
    /// `{"prompt", "max_tokens", "temperature"}` -> `{"text"}`
    Completion,
    /// OpenAI-style `/chat/completions`: one user message in, first choice out.
    Chat,
}

impl EndpointShape {
    pub fn for_endpoint(endpoint: &str) -> Self {
        if endpoint.trim_end_matches('/').ends_with("/chat/completions") {
            EndpointShape::Chat
        } else {
            EndpointShape::Completion
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpModel {
    endpoint: String,
    api_key: Option<String>,
    shape: EndpointShape,
    client: reqwest::Client,
}

impl HttpModel {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Self {
        let endpoint = endpoint.into();
        Self {
            shape: EndpointShape::for_endpoint(&endpoint),
            endpoint,
            api_key,
            client: reqwest::Client::new(),
        }
    }

    /// Endpoint from `AGENT_LLM_ENDPOINT`, key from `AGENT_LLM_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| GatewayError::MissingEnv(ENV_ENDPOINT))?;
        Ok(Self::new(endpoint, std::env::var(ENV_API_KEY).ok()))
    }

    /// Endpoint given explicitly, key still only from the environment.
    pub fn with_env_credentials(endpoint: impl Into<String>) -> Self {
        Self::new(endpoint, std::env::var(ENV_API_KEY).ok())
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn shape(&self) -> EndpointShape {
        self.shape
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        // roughly four characters per token
        let max_tokens = request.max_output_chars.div_ceil(4).max(1);
        match self.shape {
            EndpointShape::Completion => json!({
                "prompt": request.prompt,
                "max_tokens": max_tokens,
                "temperature": request.temperature,
            }),
            EndpointShape::Chat => json!({
                "messages": [{"role": "user", "content": request.prompt}],
                "max_tokens": max_tokens,
                "temperature": request.temperature,
            }),
        }
    }

    fn extract(&self, body: &Value) -> Option<String> {
        let text = match self.shape {
            EndpointShape::Completion => body.get("text"),
            EndpointShape::Chat => body.pointer("/choices/0/message/content"),
        };
        text.and_then(Value::as_str).map(str::to_string)
    }
}

#[async_trait]
impl LanguageModel for HttpModel {
    async fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut call = self
            .client
            .post(&self.endpoint)
            .timeout(request.deadline)
            .json(&self.body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().await.map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(request.deadline)
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let body = response.text().await.map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::EndpointError { status: status.as_u16(), body });
        }
        let value: Value = serde_json::from_str(&body).map_err(|_| GatewayError::EndpointError {
            status: status.as_u16(),
            body: body.clone(),
        })?;
        self.extract(&value)
            .ok_or(GatewayError::EndpointError { status: status.as_u16(), body })
    }
}
