//! Chat-completion and embedding clients.
//!
//! [`HttpClient`] speaks the OpenAI-compatible `/chat/completions` and
//! `/embeddings` wire shape with bounded retries. [`MockLlm`] is a
//! deterministic in-process stand-in that never touches the network.
//! [`Recorder`] and [`ReplayClient`] capture and replay traffic so pipeline
//! runs can be reproduced offline.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::json::{jsonl_lines, to_canonical_string};
use crate::linalg::Vector;

pub const CHAT_ENDPOINT: &str = "chat/completions";
pub const EMBEDDINGS_ENDPOINT: &str = "embeddings";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("messages must not be empty")]
    EmptyMessages,
    #[error("{0} message has empty content")]
    EmptyContent(Role),
    #[error("invalid completion params: {0}")]
    InvalidParams(String),
    #[error("text to embed must not be empty")]
    EmptyText,
    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("server returned {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no recorded response for {endpoint} request")]
    ReplayMiss { endpoint: String },
    #[error("replay file: {0}")]
    Replay(String),
}

impl LlmError {
    /// Errors that originate from the remote side rather than the caller.
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            LlmError::Network { .. } | LlmError::Status { .. } | LlmError::Malformed(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl CompletionParams {
    pub fn new(model: impl Into<String>, temperature: f64, max_tokens: u32) -> Self {
        Self {
            model: model.into(),
            temperature,
            max_tokens,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: i64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidParams(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidParams("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// The general-purpose language model used for insight and preference
/// generation, plus the embedder behind history selection.
pub trait LanguageModel: Send + Sync {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError>;

    fn embed(&self, text: &str, model: &str) -> Result<Vector, LlmError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for Arc<T> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError> {
        (**self).complete(messages, params)
    }

    fn embed(&self, text: &str, model: &str) -> Result<Vector, LlmError> {
        (**self).embed(text, model)
    }
}

fn validate_messages(messages: &[ChatMessage]) -> Result<(), LlmError> {
    if messages.is_empty() {
        return Err(LlmError::EmptyMessages);
    }
    for m in messages {
        if m.role != Role::Assistant && m.content.is_empty() {
            return Err(LlmError::EmptyContent(m.role));
        }
    }
    Ok(())
}

/// Canonical chat-completions request body. Identical inputs give
/// identical bytes.
pub fn chat_request_body(messages: &[ChatMessage], params: &CompletionParams) -> String {
    let mut body = json!({
        "model": params.model,
        "messages": messages,
        "temperature": params.temperature,
        "max_tokens": params.max_tokens,
    });
    if let Some(seed) = params.seed {
        body["seed"] = json!(seed);
    }
    to_canonical_string(&body).expect("request body serializes")
}

pub fn embedding_request_body(text: &str, model: &str) -> String {
    to_canonical_string(&json!({ "model": model, "input": text })).expect("request body serializes")
}

fn chat_response_body(text: &str) -> String {
    to_canonical_string(&json!({
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
    }))
    .expect("response body serializes")
}

fn embedding_response_body(values: &[f64]) -> String {
    to_canonical_string(&json!({
        "object": "list",
        "data": [{"index": 0, "embedding": values}],
    }))
    .expect("response body serializes")
}

pub fn parse_chat_response(body: &str) -> Result<String, LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
}

pub fn parse_embedding_response(body: &str) -> Result<Vector, LlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| LlmError::Malformed(e.to_string()))?;
    let arr = v
        .pointer("/data/0/embedding")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Malformed("missing data[0].embedding".into()))?;
    let values = arr
        .iter()
        .map(|x| x.as_f64())
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| LlmError::Malformed("non-numeric embedding value".into()))?;
    let vec = Vector::new(values).map_err(|e| LlmError::Malformed(e.to_string()))?;
    // already-unit vectors pass through untouched so replays are bit-exact
    if (vec.norm() - 1.0).abs() <= 1e-12 {
        return Ok(vec);
    }
    vec.normalized()
        .map_err(|_| LlmError::Malformed("zero embedding".into()))
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cond: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            cond: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cond.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cond.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 500,
            max_backoff_ms: 10_000,
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, failed_attempts: u32) -> Duration {
        let exp = self.multiplier.powi(failed_attempts.saturating_sub(1) as i32);
        let ms = (self.initial_backoff_ms as f64 * exp).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

/// OpenAI-compatible HTTP client.
pub struct HttpClient {
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    gate: Semaphore,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        retry: RetryPolicy,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Network {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            retry,
            gate: Semaphore::new(max_in_flight),
            http,
        })
    }

    /// POSTs `body` to `endpoint`, retrying connection failures, 429 and
    /// 5xx responses. Returns the response body and the attempt count.
    pub fn post(&self, endpoint: &str, body: &str) -> Result<(String, u32), LlmError> {
        let url = format!("{}/{}", self.base_url, endpoint);
        let _permit = self.gate.acquire();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let mut req = self
                .http
                .post(&url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.to_owned());
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        return Ok((text, attempt));
                    }
                    let err = LlmError::Status {
                        status: status.as_u16(),
                        body: text,
                        attempts: attempt,
                    };
                    if status.as_u16() == 429 || status.is_server_error() {
                        err
                    } else {
                        return Err(err);
                    }
                }
                Err(e) => LlmError::Network {
                    attempts: attempt,
                    message: e.to_string(),
                },
            };
            if attempt >= max {
                return Err(outcome);
            }
            log::debug!("{endpoint} attempt {attempt} failed: {outcome}; retrying");
            std::thread::sleep(self.retry.backoff(attempt));
        }
    }
}

impl LanguageModel for HttpClient {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError> {
        validate_messages(messages)?;
        params.validate()?;
        let (body, attempts) = self.post(CHAT_ENDPOINT, &chat_request_body(messages, params))?;
        Ok(Completion {
            text: parse_chat_response(&body)?,
            attempts,
        })
    }

    fn embed(&self, text: &str, model: &str) -> Result<Vector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::EmptyText);
        }
        let (body, _) = self.post(EMBEDDINGS_ENDPOINT, &embedding_request_body(text, model))?;
        parse_embedding_response(&body)
    }
}

/// A scripted response: the first rule whose `contains` occurs in the
/// concatenated message contents wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub contains: String,
    pub response: String,
}

type Hook = dyn Fn(&[ChatMessage], &CompletionParams) -> Option<String> + Send + Sync;

/// Deterministic offline model.
///
/// Unscripted completions are a canned string derived from the request
/// hash and the effective seed; embeddings come from [`hash_embedding`].
pub struct MockLlm {
    seed: u64,
    dim: usize,
    rules: Vec<ScriptRule>,
    hook: Option<Box<Hook>>,
    calls: AtomicUsize,
}

impl MockLlm {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            seed,
            dim,
            rules: Vec::new(),
            hook: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_rules(mut self, rules: Vec<ScriptRule>) -> Self {
        self.rules = rules;
        self
    }

    pub fn with_hook<F>(mut self, hook: F) -> Self
    where
        F: Fn(&[ChatMessage], &CompletionParams) -> Option<String> + Send + Sync + 'static,
    {
        self.hook = Some(Box::new(hook));
        self
    }

    /// Number of `complete` calls served so far.
    pub fn completion_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl LanguageModel for MockLlm {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError> {
        validate_messages(messages)?;
        params.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(text) = self.hook.as_ref().and_then(|h| h(messages, params)) {
            return Ok(Completion { text, attempts: 1 });
        }
        let joined: String = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        if let Some(rule) = self.rules.iter().find(|r| joined.contains(&r.contains)) {
            return Ok(Completion {
                text: rule.response.clone(),
                attempts: 1,
            });
        }
        let seed = params.seed.map_or(self.seed, |s| s as u64);
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(chat_request_body(messages, &CompletionParams { seed: None, ..params.clone() }));
        let digest = h.finalize();
        let tag = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Ok(Completion {
            text: format!("mock response {tag:016x}"),
            attempts: 1,
        })
    }

    fn embed(&self, text: &str, _model: &str) -> Result<Vector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::EmptyText);
        }
        Ok(hash_embedding(text, self.seed, self.dim))
    }
}

fn embedding_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Bag-of-hashed-tokens embedding: each lowercase token seeds a Gaussian
/// vector, the vectors are summed and normalized. Texts sharing tokens
/// land near each other; output depends only on `(text, seed, dim)`.
pub fn hash_embedding(text: &str, seed: u64, dim: usize) -> Vector {
    assert!(dim > 0, "embedding dim must be positive");
    let mut tokens = embedding_tokens(text);
    if tokens.is_empty() {
        tokens.push(text.to_owned());
    }
    let mut acc = vec![0.0f64; dim];
    for t in &tokens {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(t.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(key);
        for a in acc.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *a += g;
        }
    }
    let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    Vector::new(acc.into_iter().map(|v| v / n).collect()).expect("finite embedding")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Exchange {
    endpoint: String,
    request: String,
    response: String,
}

/// Wraps a model and appends every exchange to a JSON Lines replay file.
pub struct Recorder<M> {
    inner: M,
    out: Mutex<File>,
}

impl<M: LanguageModel> Recorder<M> {
    pub fn create(inner: M, path: &Path) -> std::io::Result<Self> {
        let out = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(Self {
            inner,
            out: Mutex::new(out),
        })
    }

    fn log(&self, endpoint: &str, request: String, response: String) {
        let line = to_canonical_string(&Exchange {
            endpoint: endpoint.to_owned(),
            request,
            response,
        })
        .expect("exchange serializes");
        let mut f = self.out.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{line}") {
            log::warn!("failed to record exchange: {e}");
        }
    }
}

impl<M: LanguageModel> LanguageModel for Recorder<M> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError> {
        let c = self.inner.complete(messages, params)?;
        self.log(
            CHAT_ENDPOINT,
            chat_request_body(messages, params),
            chat_response_body(&c.text),
        );
        Ok(c)
    }

    fn embed(&self, text: &str, model: &str) -> Result<Vector, LlmError> {
        let v = self.inner.embed(text, model)?;
        self.log(
            EMBEDDINGS_ENDPOINT,
            embedding_request_body(text, model),
            embedding_response_body(v.as_slice()),
        );
        Ok(v)
    }
}

/// Serves responses from a replay file; never performs network IO.
pub struct ReplayClient {
    table: HashMap<(String, String), String>,
}

impl ReplayClient {
    pub fn from_jsonl(text: &str) -> Result<Self, LlmError> {
        let mut table = HashMap::new();
        for (n, line) in jsonl_lines(text) {
            let ex: Exchange = serde_json::from_str(line)
                .map_err(|e| LlmError::Replay(format!("line {n}: {e}")))?;
            table.insert((ex.endpoint, ex.request), ex.response);
        }
        Ok(Self { table })
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Replay(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    fn lookup(&self, endpoint: &str, request: String) -> Result<&str, LlmError> {
        self.table
            .get(&(endpoint.to_owned(), request))
            .map(String::as_str)
            .ok_or_else(|| LlmError::ReplayMiss {
                endpoint: endpoint.to_owned(),
            })
    }
}

impl LanguageModel for ReplayClient {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Completion, LlmError> {
        validate_messages(messages)?;
        params.validate()?;
        let body = self.lookup(CHAT_ENDPOINT, chat_request_body(messages, params))?;
        Ok(Completion {
            text: parse_chat_response(body)?,
            attempts: 1,
        })
    }

    fn embed(&self, text: &str, model: &str) -> Result<Vector, LlmError> {
        if text.is_empty() {
            return Err(LlmError::EmptyText);
        }
        parse_embedding_response(self.lookup(EMBEDDINGS_ENDPOINT, embedding_request_body(text, model))?)
    }
}
