//! Chat model clients.
//!
//! [`ChatBackend`] hides whether answers come from a remote chat-completions
//! endpoint or from [`StubBackend`], which derives its answer from the request's
//! [`StructuredContext`] and is therefore a pure function of the request. Every
//! prompt asks for a final line of the form `PREDICTION: <number>`, which
//! [`extract_prediction`] reads back.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::Duration;

use chrono::NaiveDate;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{combine, AgentId, FusionWeights, TrendLabel};

pub const PREDICTION_MARKER: &str = "PREDICTION:";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("backend unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("no number found in model output")]
    NoNumber,
    #[error("log write failed: {0}")]
    Log(#[from] io::Error),
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) | LlmError::Timeout => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decoding {
    pub deterministic: bool,
    pub max_steps: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Decoding {
            deterministic: true,
            max_steps: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedExample {
    pub date: NaiveDate,
    pub target: f64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentValue {
    pub agent: AgentId,
    pub value: f64,
}

/// Machine-readable mirror of the values printed in a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum StructuredContext {
    Predictor {
        agent: AgentId,
        current_close: f64,
        retrieved: Vec<RetrievedExample>,
    },
    Fusion {
        predictions: Vec<AgentValue>,
        /// Filled in once the trend tool has been called.
        trend: Option<TrendLabel>,
        weights: FusionWeights,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub structured_context: Option<StructuredContext>,
    pub decoding: Decoding,
}

impl ChatRequest {
    pub fn new(system_text: &str, user_text: &str) -> Self {
        ChatRequest {
            system_text: system_text.to_string(),
            user_text: user_text.to_string(),
            structured_context: None,
            decoding: Decoding::default(),
        }
    }

    pub fn with_context(mut self, ctx: StructuredContext) -> Self {
        self.structured_context = Some(ctx);
        self
    }

    /// Short content hash used to cross-reference a prompt in the run log.
    pub fn prompt_ref(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

/// Deterministic backend.
///
/// * predictor context: similarity-weighted mean of the retrieved targets
///   (negative similarities weigh zero; no usable weight falls back to the plain
///   mean; no examples at all falls back to the current close);
/// * fusion context without a trend: asks for the `get_trend()` tool;
/// * fusion context with a trend: the rule-based weighted combination;
/// * no context: echoes the user text.
#[derive(Debug, Clone, Default)]
pub struct StubBackend;

pub const STUB_ID: &str = "stub";

pub fn similarity_weighted_mean(examples: &[RetrievedExample]) -> Option<f64> {
    if examples.is_empty() {
        return None;
    }
    let weights: Vec<f64> = examples.iter().map(|e| e.similarity.max(0.0)).collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        Some(examples.iter().zip(&weights).map(|(e, w)| e.target * w).sum::<f64>() / total)
    } else {
        Some(examples.iter().map(|e| e.target).sum::<f64>() / examples.len() as f64)
    }
}

impl ChatBackend for StubBackend {
    fn id(&self) -> &str {
        STUB_ID
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let text = match &req.structured_context {
            None => req.user_text.clone(),
            Some(StructuredContext::Predictor {
                current_close,
                retrieved,
                ..
            }) => match similarity_weighted_mean(retrieved) {
                Some(v) => format!(
                    "Similarity-weighted mean of {} retrieved outcomes.\n{PREDICTION_MARKER} {v:.2}",
                    retrieved.len()
                ),
                None => format!("No historical examples; repeating the current level.\n{PREDICTION_MARKER} {current_close:.2}"),
            },
            Some(StructuredContext::Fusion {
                trend: None,
                ..
            }) => "Thought: I need the recent trend before weighting the agents.\nACTION: get_trend()".to_string(),
            Some(StructuredContext::Fusion {
                predictions,
                trend: Some(label),
                weights,
            }) => {
                let values: Vec<(AgentId, f64)> = predictions.iter().map(|p| (p.agent, p.value)).collect();
                let v = combine(weights.for_label(*label), &values);
                format!("Thought: trend is {label}; applying the matching weights.\n{PREDICTION_MARKER} {v:.2}")
            }
        };
        Ok(ChatResponse {
            text,
            backend_id: STUB_ID.to_string(),
        })
    }
}

/// Returns the number after the last `PREDICTION:` marker, or failing that the
/// last standalone number in the text.
pub fn extract_prediction(text: &str) -> Result<f64, LlmError> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    static NUMBER: OnceLock<Regex> = OnceLock::new();
    let marker = MARKER.get_or_init(|| {
        Regex::new(r"PREDICTION:\s*\**\s*(-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)").expect("marker regex")
    });
    let number = NUMBER.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("number regex"));

    if let Some(c) = marker.captures_iter(text).last() {
        return c[1].parse().map_err(|_| LlmError::NoNumber);
    }
    let bytes = text.as_bytes();
    number
        .find_iter(text)
        .filter(|m| {
            let before = m.start().checked_sub(1).map(|i| bytes[i]);
            let after = bytes.get(m.end()).copied();
            let glued = |b: Option<u8>| b.is_some_and(|b| b.is_ascii_alphanumeric() || b == b'_');
            !glued(before) && !glued(after) && before != Some(b'.')
        })
        .last()
        .and_then(|m| m.as_str().parse().ok())
        .ok_or(LlmError::NoNumber)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 2,
            backoff_base_ms: 1000,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Blocking JSON-over-HTTP client shared by the remote chat and embedding backends.
pub struct HttpJsonClient {
    agent: ureq::Agent,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Limiter,
}

impl HttpJsonClient {
    pub fn new(timeout: Duration, api_key: Option<String>, retry: RetryPolicy, max_concurrent: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpJsonClient {
            agent,
            api_key,
            retry,
            limiter: Limiter::new(max_concurrent),
        }
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, LlmError> {
        let _slot = self.limiter.acquire();
        let mut req = self.agent.post(url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Malformed(e.to_string()))
    }

    /// POSTs `body`, retrying transport failures, timeouts, 429 and 5xx with
    /// exponential backoff. Exhausted retries surface as [`LlmError::Unavailable`].
    pub fn post(&self, url: &str, body: &Value) -> Result<Value, LlmError> {
        let mut attempt = 0u32;
        loop {
            match self.post_once(url, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() => {
                    if attempt >= self.retry.retries {
                        return Err(LlmError::Unavailable {
                            attempts: attempt + 1,
                            last: e.to_string(),
                        });
                    }
                    let wait = self.retry.backoff_base_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("request to {url} failed ({e}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteChatConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
    pub max_concurrent: usize,
}

impl Default for RemoteChatConfig {
    fn default() -> Self {
        RemoteChatConfig {
            endpoint: "https://api.openai.com/v1".into(),
            model: "o3-mini".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
            max_concurrent: 4,
        }
    }
}

pub fn chat_completions_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("chat/completions") {
        base.to_string()
    } else {
        format!("{base}/chat/completions")
    }
}

/// Chat-completions compatible backend.
pub struct RemoteBackend {
    config: RemoteChatConfig,
    client: HttpJsonClient,
    id: String,
}

impl RemoteBackend {
    /// Reads the API key from the configured environment variable. A missing
    /// variable is allowed (local endpoints often need none) and only logged.
    pub fn from_env(config: RemoteChatConfig) -> Self {
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if key.is_none() {
            log::warn!("{} is not set; sending unauthenticated requests", config.api_key_env);
        }
        Self::with_key(config, key)
    }

    pub fn with_key(config: RemoteChatConfig, api_key: Option<String>) -> Self {
        let client = HttpJsonClient::new(
            Duration::from_secs(config.timeout_secs),
            api_key,
            config.retry.clone(),
            config.max_concurrent,
        );
        RemoteBackend {
            id: format!("remote:{}", config.model),
            config,
            client,
        }
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let mut user = req.user_text.clone();
        if let Some(ctx) = &req.structured_context {
            if let Ok(s) = serde_json::to_string(ctx) {
                user.push_str("\n\nStructured context (JSON):\n");
                user.push_str(&s);
            }
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": user},
            ],
        });
        if req.decoding.deterministic {
            body["temperature"] = json!(0);
            body["top_p"] = json!(1);
            body["seed"] = json!(0);
        }
        body
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let url = chat_completions_url(&self.config.endpoint);
        let v = self.client.post(&url, &self.request_body(req))?;
        let text = v
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))?;
        if text.trim().is_empty() {
            return Err(LlmError::Malformed("empty completion".into()));
        }
        Ok(ChatResponse {
            text: text.to_string(),
            backend_id: self.id.clone(),
        })
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    at: Option<String>,
    prompt_ref: String,
    backend: &'a str,
    request: &'a ChatRequest,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Wraps a backend and appends every exchange to a JSON-lines file.
pub struct LoggingBackend<B> {
    inner: B,
    sink: Mutex<File>,
    freeze_timestamps: bool,
}

impl<B: ChatBackend> LoggingBackend<B> {
    pub fn new(inner: B, path: &Path, freeze_timestamps: bool) -> io::Result<Self> {
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(LoggingBackend {
            inner,
            sink: Mutex::new(sink),
            freeze_timestamps,
        })
    }
}

impl<B: ChatBackend> ChatBackend for LoggingBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let result = self.inner.chat(req);
        let line = LogLine {
            at: (!self.freeze_timestamps).then(|| chrono::Utc::now().to_rfc3339()),
            prompt_ref: req.prompt_ref(),
            backend: self.inner.id(),
            request: req,
            response: result.as_ref().ok().map(|r| r.text.as_str()),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        let mut encoded = serde_json::to_vec(&line).map_err(|e| LlmError::Log(e.into()))?;
        encoded.push(b'\n');
        self.sink
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .write_all(&encoded)?;
        result
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(req)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn chat(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).chat(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(targets: &[f64], sims: &[f64]) -> Vec<RetrievedExample> {
        targets
            .iter()
            .zip(sims)
            .enumerate()
            .map(|(i, (&target, &similarity))| RetrievedExample {
                date: NaiveDate::from_ymd_opt(2024, 1, 1 + i as u32).unwrap(),
                target,
                similarity,
            })
            .collect()
    }

    fn predictor_req(targets: &[f64], sims: &[f64]) -> ChatRequest {
        ChatRequest::new("sys", "user").with_context(StructuredContext::Predictor {
            agent: AgentId::Daily,
            current_close: 50.0,
            retrieved: examples(targets, sims),
        })
    }

    #[test]
    fn stub_weighted_mean() {
        let resp = StubBackend.chat(&predictor_req(&[10.0, 12.0, 14.0], &[0.9, 0.8, 0.7])).unwrap();
        assert!(resp.text.contains("PREDICTION: 11.83"), "{}", resp.text);
        assert_eq!(resp.backend_id, "stub");
    }

    #[test]
    fn stub_singleton() {
        let resp = StubBackend.chat(&predictor_req(&[71.0], &[1.0])).unwrap();
        assert!(resp.text.contains("PREDICTION: 71.00"));
    }

    #[test]
    fn stub_persistence_without_examples() {
        let resp = StubBackend.chat(&predictor_req(&[], &[])).unwrap();
        assert_eq!(extract_prediction(&resp.text).unwrap(), 50.0);
    }

    #[test]
    fn stub_negative_similarities_fall_back_to_plain_mean() {
        assert_eq!(similarity_weighted_mean(&examples(&[2.0, 4.0], &[-0.5, -0.1])), Some(3.0));
        assert_eq!(similarity_weighted_mean(&examples(&[2.0, 4.0], &[-0.5, 1.0])), Some(4.0));
    }

    #[test]
    fn stub_fusion_requests_trend_then_answers() {
        let preds = vec![
            AgentValue { agent: AgentId::Daily, value: 10.0 },
            AgentValue { agent: AgentId::Weekday, value: 12.0 },
            AgentValue { agent: AgentId::Windowed, value: 20.0 },
        ];
        let mut req = ChatRequest::new("sys", "user").with_context(StructuredContext::Fusion {
            predictions: preds.clone(),
            trend: None,
            weights: FusionWeights::default(),
        });
        let first = StubBackend.chat(&req).unwrap();
        assert!(first.text.contains("ACTION: get_trend()"));
        req.structured_context = Some(StructuredContext::Fusion {
            predictions: preds,
            trend: Some(TrendLabel::Stable),
            weights: FusionWeights::default(),
        });
        let second = StubBackend.chat(&req).unwrap();
        // stable weights daily 0.2, weekday 0.2, windowed 0.6
        assert!(second.text.contains("PREDICTION: 16.40"), "{}", second.text);
    }

    #[test]
    fn stub_is_pure() {
        let req = predictor_req(&[3.0, 9.0], &[0.3, 0.6]);
        assert_eq!(StubBackend.chat(&req).unwrap(), StubBackend.chat(&req).unwrap());
        let echo = ChatRequest::new("sys", "hello");
        assert_eq!(StubBackend.chat(&echo).unwrap().text, "hello");
    }

    #[test]
    fn extraction_rules() {
        assert_eq!(extract_prediction("PREDICTION: 42").unwrap(), 42.0);
        assert_eq!(extract_prediction("I think 40, but PREDICTION: 42.5").unwrap(), 42.5);
        assert_eq!(extract_prediction("the value will be 37 tomorrow").unwrap(), 37.0);
        assert_eq!(extract_prediction("PREDICTION: **-3.25**").unwrap(), -3.25);
        assert_eq!(extract_prediction("model o3 says 12").unwrap(), 12.0);
        assert!(matches!(extract_prediction("no digits here"), Err(LlmError::NoNumber)));
        assert!(matches!(extract_prediction("gpt4o"), Err(LlmError::NoNumber)));
    }

    #[test]
    fn completions_url() {
        assert_eq!(chat_completions_url("http://h/v1/"), "http://h/v1/chat/completions");
        assert_eq!(chat_completions_url("http://h/v1/chat/completions"), "http://h/v1/chat/completions");
    }

    #[test]
    fn prompt_ref_is_stable() {
        let a = ChatRequest::new("s", "u");
        assert_eq!(a.prompt_ref(), ChatRequest::new("s", "u").prompt_ref());
        assert_ne!(a.prompt_ref(), ChatRequest::new("s", "v").prompt_ref());
        assert_eq!(a.prompt_ref().len(), 16);
    }

    #[test]
    fn remote_body_requests_deterministic_decoding() {
        let backend = RemoteBackend::with_key(RemoteChatConfig::default(), None);
        let body = backend.request_body(&predictor_req(&[1.0], &[1.0]));
        assert_eq!(body["model"], "o3-mini");
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["messages"][0]["role"], "system");
        assert!(body["messages"][1]["content"].as_str().unwrap().contains("\"task\":\"predictor\""));
    }

    #[test]
    fn logging_backend_writes_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        let backend = LoggingBackend::new(StubBackend, &path, true).unwrap();
        backend.chat(&predictor_req(&[1.0], &[1.0])).unwrap();
        backend.chat(&ChatRequest::new("s", "u")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].get("at").is_none());
        assert_eq!(lines[1]["response"], "u");
    }
}
