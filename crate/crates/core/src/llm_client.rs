//! Text generation over OpenAI-compatible chat-completions endpoints and
//! deterministic in-process mocks, with retries, per-endpoint admission
//! control and a persistent response cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::prompting::{last_user_message, Message, MessageList, Stage};
use crate::perturb::TransformedItem;
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingDefaults {
    pub temperature: f64,
    pub answer_max_tokens: u32,
    pub intermediate_max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampling_seed: Option<u64>,
}

impl Default for SamplingDefaults {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            answer_max_tokens: 8,
            intermediate_max_tokens: 1024,
            sampling_seed: None,
        }
    }
}

impl SamplingDefaults {
    pub fn request(&self, stage: Stage, messages: MessageList) -> GenerationRequest {
        GenerationRequest {
            messages,
            temperature: self.temperature,
            max_tokens: if stage.is_answer() {
                self.answer_max_tokens
            } else {
                self.intermediate_max_tokens
            },
            sampling_seed: self.sampling_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Environment variable holding the bearer token; unauthenticated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_parallel")]
    pub max_parallel: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub retry: RetryConfig,
    #[serde(default)]
    pub sampling: SamplingDefaults,
}

fn default_max_parallel() -> usize {
    4
}

fn default_timeout_secs() -> f64 {
    120.0
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            max_parallel: default_max_parallel(),
            timeout_secs: default_timeout_secs(),
            retry: RetryConfig::default(),
            sampling: SamplingDefaults::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        let bad = |m: &str| Err(GenerationError::Config(format!("{}: {m}", self.model_name)));
        if self.max_parallel == 0 {
            return bad("max_parallel must be at least 1");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be at least 1");
        }
        if self.sampling.temperature.is_nan() || self.sampling.temperature < 0.0 {
            return bad("temperature must be non-negative");
        }
        if self.sampling.answer_max_tokens == 0 || self.sampling.intermediate_max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
            return bad("timeout must be positive");
        }
        if reqwest::Url::parse(&self.base_url).is_err() {
            return bad("base_url is not a URL");
        }
        Ok(())
    }

    fn api_key(&self) -> Result<Option<String>, GenerationError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) if v.is_empty() => Ok(None),
                Ok(v) => Ok(Some(v)),
                Err(_) => Err(GenerationError::Config(format!(
                    "environment variable {var} is not set"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: MessageList,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureClass {
    Retryable,
    Permanent,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerationError {
    #[error("gave up after {attempts} attempts: {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("request rejected with status {status}: {message}")]
    Rejected { status: u16, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl GenerationError {
    pub fn class(&self) -> FailureClass {
        match self {
            GenerationError::Exhausted { .. } => FailureClass::Retryable,
            _ => FailureClass::Permanent,
        }
    }
}

/// SHA-256 over the canonical JSON form of the request and the identity of
/// the model serving it.
pub fn cache_key(endpoint_identity: &str, req: &GenerationRequest) -> String {
    let canonical = json!({
        "model": endpoint_identity,
        "messages": req.messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "seed": req.sampling_seed,
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

enum AttemptError {
    Retryable(String),
    Permanent(GenerationError),
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Client for one chat-completions endpoint. Shareable across workers.
#[derive(Debug)]
pub struct EndpointClient {
    config: EndpointConfig,
    http: reqwest::Client,
    slots: Semaphore,
    network_calls: AtomicU64,
}

impl EndpointClient {
    pub fn new(config: EndpointConfig) -> Result<Self, GenerationError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GenerationError::Config(e.to_string()))?;
        Ok(Self {
            slots: Semaphore::new(config.max_parallel),
            config,
            http,
            network_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::Relaxed)
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, GenerationError> {
        let api_key = self.config.api_key()?;
        let mut body = json!({
            "model": self.config.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.sampling_seed {
            body["seed"] = json!(seed);
        }

        let started = Instant::now();
        let max_attempts = self.config.retry.max_attempts;
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let backoff = self.config.retry.backoff_base_ms.saturating_mul(1 << (attempt - 2).min(16));
                tokio::time::sleep(Duration::from_millis(backoff)).await;
            }
            let outcome = {
                let _permit = self.slots.acquire().await.expect("semaphore never closed");
                self.attempt(&body, api_key.as_deref()).await
            };
            match outcome {
                Ok((text, finish_reason)) => {
                    return Ok(GenerationResult {
                        text,
                        finish_reason,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempts: attempt,
                        from_cache: false,
                    })
                }
                Err(AttemptError::Permanent(e)) => return Err(e),
                Err(AttemptError::Retryable(msg)) => {
                    tracing::debug!(model = %self.config.model_name, attempt, %msg, "retryable failure");
                    last_error = msg;
                }
            }
        }
        Err(GenerationError::Exhausted {
            attempts: max_attempts,
            message: last_error,
        })
    }

    async fn attempt(
        &self,
        body: &serde_json::Value,
        api_key: Option<&str>,
    ) -> Result<(String, String), AttemptError> {
        self.network_calls.fetch_add(1, Ordering::Relaxed);
        let mut request = self.http.post(self.url()).json(body);
        if let Some(key) = api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .await
            .map_err(|e| AttemptError::Retryable(format!("transport: {e}")))?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("status {status}")));
        }
        let text = response
            .text()
            .await
            .map_err(|e| AttemptError::Retryable(format!("reading body: {e}")))?;
        if !status.is_success() {
            return Err(AttemptError::Permanent(GenerationError::Rejected {
                status: status.as_u16(),
                message: text.chars().take(500).collect(),
            }));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Permanent(GenerationError::MalformedResponse(e.to_string())))?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            AttemptError::Permanent(GenerationError::MalformedResponse("no choices".into()))
        })?;
        Ok((
            choice.message.content.unwrap_or_default(),
            choice.finish_reason.unwrap_or_else(|| "unknown".into()),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockBehavior {
    TransformOracle,
    TextOracle(String),
    FixedLabel(char),
    FormatViolator(String),
    Echo,
}

#[derive(Debug, Clone, Copy)]
pub struct MockSpec<'a> {
    pub behavior: &'a MockBehavior,
    pub context: &'a TransformedItem,
}

fn instant(text: String) -> GenerationResult {
    GenerationResult {
        text,
        finish_reason: "stop".into(),
        latency_ms: 0,
        attempts: 1,
        from_cache: false,
    }
}

/// Deterministic answer of an instrumented mock model.
///
/// `text_oracle` falls back to the first presented option that is not the
/// "None of the others" option when the original gold text is absent.
pub fn mock_generate(spec: &MockSpec<'_>, req: &GenerationRequest) -> GenerationResult {
    let t = spec.context;
    let text = match spec.behavior {
        MockBehavior::TransformOracle => t.gold_label.to_string(),
        MockBehavior::TextOracle(gold) => t
            .presented_options
            .iter()
            .find(|o| &o.text == gold)
            .or_else(|| {
                t.presented_options
                    .iter()
                    .find(|o| Some(&o.text) != t.provenance.noto_text.as_ref())
            })
            .or_else(|| t.presented_options.first())
            .map(|o| o.label.to_string())
            .unwrap_or_default(),
        MockBehavior::FixedLabel(c) => c.to_string(),
        MockBehavior::FormatViolator(decoration) => format!("{}{decoration}", t.gold_label),
        MockBehavior::Echo => last_user_message(&req.messages).unwrap_or_default().to_string(),
    };
    instant(text)
}

/// Answer-stage behavior of a configured mock model; `text_oracle` takes the
/// item's original gold text at call time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockAnswer {
    TransformOracle,
    TextOracle,
    FixedLabel { label: char },
    FormatViolator { decoration: String },
    Echo,
}

/// Step-1 behavior of a configured mock model in two-step pipelines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockIntermediate {
    #[default]
    Echo,
    Fixed {
        text: String,
    },
    /// Echoes the prompt with the last option line removed for items selected
    /// by [`mangles_item`].
    DropOption {
        modulus: u64,
    },
}

/// Items a `drop_option` mock mangles: a stable hash of the id divisible by
/// `modulus`.
pub fn mangles_item(item_id: &str, modulus: u64) -> bool {
    modulus > 0 && derive_seed(0, item_id, 0, "mangle").is_multiple_of(modulus)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockModelConfig {
    pub answer: MockAnswer,
    #[serde(default)]
    pub intermediate: MockIntermediate,
    /// Artificial latency per generation.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub delay_ms: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

impl MockModelConfig {
    pub fn identity(&self) -> String {
        format!(
            "mock:{}",
            serde_json::to_string(&(&self.answer, &self.intermediate)).expect("serializable")
        )
    }

    pub fn generate(&self, req: &GenerationRequest, ctx: &GenerationContext<'_>) -> GenerationResult {
        if ctx.stage.is_answer() {
            let behavior = match &self.answer {
                MockAnswer::TransformOracle => MockBehavior::TransformOracle,
                MockAnswer::TextOracle => MockBehavior::TextOracle(ctx.original_gold_text.to_string()),
                MockAnswer::FixedLabel { label } => MockBehavior::FixedLabel(*label),
                MockAnswer::FormatViolator { decoration } => MockBehavior::FormatViolator(decoration.clone()),
                MockAnswer::Echo => MockBehavior::Echo,
            };
            return mock_generate(
                &MockSpec {
                    behavior: &behavior,
                    context: ctx.item,
                },
                req,
            );
        }
        let prompt = last_user_message(&req.messages).unwrap_or_default();
        match &self.intermediate {
            MockIntermediate::Echo => instant(prompt.to_string()),
            MockIntermediate::Fixed { text } => instant(text.clone()),
            MockIntermediate::DropOption { modulus } => {
                if !mangles_item(&ctx.item.base_id, *modulus) {
                    return instant(prompt.to_string());
                }
                let dropped = ctx
                    .item
                    .presented_options
                    .last()
                    .map(|o| format!("{}. {}", o.label, o.text))
                    .unwrap_or_default();
                let kept: Vec<&str> = prompt.lines().filter(|l| l.trim() != dropped).collect();
                instant(kept.join("\n"))
            }
        }
    }
}

/// Item context a generation is made for; consulted by mocks only.
#[derive(Debug, Clone, Copy)]
pub struct GenerationContext<'a> {
    pub item: &'a TransformedItem,
    pub original_gold_text: &'a str,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheLine {
    key: String,
    result: GenerationResult,
}

/// Append-only on-disk cache of generation results keyed by [`cache_key`].
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    index: RwLock<HashMap<String, GenerationResult>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut index = HashMap::new();
        let mut ends_with_newline = true;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(rec) => {
                        index.insert(rec.key, rec.result);
                    }
                    Err(e) => tracing::warn!(path = %path.display(), line = n + 1, %e, "skipping corrupt cache record"),
                }
            }
            let bytes = std::fs::read(&path)?;
            ends_with_newline = bytes.last().is_none_or(|b| *b == b'\n');
        }
        let mut writer = OpenOptions::new().create(true).append(true).open(&path)?;
        if !ends_with_newline {
            writer.write_all(b"\n")?;
        }
        Ok(Self {
            path,
            index: RwLock::new(index),
            writer: Mutex::new(writer),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<GenerationResult> {
        self.index.read().expect("cache lock").get(key).map(|r| GenerationResult {
            attempts: 0,
            latency_ms: 0,
            from_cache: true,
            ..r.clone()
        })
    }

    pub fn put(&self, key: &str, result: &GenerationResult) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&CacheLine {
            key: key.to_string(),
            result: result.clone(),
        })
        .expect("cache line serializes");
        line.push('\n');
        {
            let mut w = self.writer.lock().expect("cache writer lock");
            w.write_all(line.as_bytes())?;
            w.flush()?;
        }
        self.index
            .write()
            .expect("cache lock")
            .insert(key.to_string(), result.clone());
        Ok(())
    }
}

/// One request/response exchange as persisted alongside results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub stage: Stage,
    pub model_id: String,
    pub cache_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_seed: Option<u64>,
    pub text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub attempts: u32,
    pub from_cache: bool,
}

impl GenerationRecord {
    pub fn new(stage: Stage, model_id: &str, req: &GenerationRequest, generated: Generated) -> Self {
        Self {
            stage,
            model_id: model_id.to_string(),
            cache_key: generated.cache_key,
            sampling_seed: req.sampling_seed,
            text: generated.result.text,
            finish_reason: generated.result.finish_reason,
            latency_ms: generated.result.latency_ms,
            attempts: generated.result.attempts,
            from_cache: generated.result.from_cache,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backend {
    Endpoint(Arc<EndpointClient>),
    Mock(MockModelConfig),
}

/// A named model: an endpoint (optionally cached) or a mock.
#[derive(Debug, Clone)]
pub struct Model {
    pub id: String,
    pub backend: Backend,
    pub cache: Option<Arc<ResponseCache>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub result: GenerationResult,
    pub cache_key: String,
}

impl Model {
    pub fn mock(id: impl Into<String>, config: MockModelConfig) -> Self {
        Self {
            id: id.into(),
            backend: Backend::Mock(config),
            cache: None,
        }
    }

    pub fn endpoint(id: impl Into<String>, client: Arc<EndpointClient>, cache: Option<Arc<ResponseCache>>) -> Self {
        Self {
            id: id.into(),
            backend: Backend::Endpoint(client),
            cache,
        }
    }

    pub fn identity(&self) -> String {
        match &self.backend {
            Backend::Endpoint(c) => c.config().model_name.clone(),
            Backend::Mock(m) => m.identity(),
        }
    }

    pub fn sampling(&self) -> SamplingDefaults {
        match &self.backend {
            Backend::Endpoint(c) => c.config().sampling.clone(),
            Backend::Mock(_) => SamplingDefaults::default(),
        }
    }

    pub fn network_calls(&self) -> u64 {
        match &self.backend {
            Backend::Endpoint(c) => c.network_calls(),
            Backend::Mock(_) => 0,
        }
    }

    pub fn request(&self, stage: Stage, messages: Vec<Message>) -> GenerationRequest {
        self.sampling().request(stage, messages)
    }

    pub async fn generate(
        &self,
        req: &GenerationRequest,
        ctx: &GenerationContext<'_>,
    ) -> Result<Generated, GenerationError> {
        let key = cache_key(&self.identity(), req);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok(Generated {
                result: hit,
                cache_key: key,
            });
        }
        let result = match &self.backend {
            Backend::Endpoint(client) => client.generate(req).await?,
            Backend::Mock(mock) => {
                if mock.delay_ms > 0 {
                    tokio::time::sleep(Duration::from_millis(mock.delay_ms)).await;
                }
                mock.generate(req, ctx)
            }
        };
        if let Some(cache) = &self.cache {
            if let Err(e) = cache.put(&key, &result) {
                tracing::warn!(path = %cache.path().display(), %e, "failed to persist cache record");
            }
        }
        Ok(Generated {
            result,
            cache_key: key,
        })
    }
}
