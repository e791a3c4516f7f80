//! Access to chat-completion and embedding endpoints.
//!
//! [`Gateway`] is the only component that talks to models. It owns the
//! response cache, bounds in-flight requests, applies the retry policy and
//! refuses prompts that cannot fit an endpoint's context window. Where the
//! replies come from is a [`Backend`]: real HTTP, a scripted mock, or a
//! closure in tests.

mod cache;
mod http;
mod mock;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheStats, CachedValue, ResponseCache};
pub use http::HttpBackend;
pub use mock::{letter_frequency, MockBackend, MockRule, MockScript};

use crate::tokenizer::TokenizerHandle;

/// Context window of the reference long-context model (128K tokens).
pub const DEFAULT_MAX_CONTEXT_TOKENS: usize = 128_000;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("endpoint {name:?} is not a {expected:?} endpoint")]
    WrongKind { name: String, expected: EndpointKind },
    #[error("prompt needs ~{estimate} tokens but endpoint {endpoint:?} allows {cap}")]
    ContextOverflow {
        endpoint: String,
        estimate: usize,
        cap: usize,
    },
    #[error("embedding request with no texts")]
    EmptyBatch,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("cache: {0}")]
    Cache(String),
    #[error("config: {0}")]
    Config(String),
}

impl GatewayError {
    fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Chat,
    Embedding,
}

fn default_max_context() -> usize {
    DEFAULT_MAX_CONTEXT_TOKENS
}

fn default_max_output() -> u32 {
    DEFAULT_MAX_OUTPUT_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub name: String,
    pub kind: EndpointKind,
    #[serde(default)]
    pub base_url: String,
    /// Model identifier sent on the wire and used in cache keys.
    pub model: String,
    #[serde(default = "default_max_context")]
    pub max_context_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output")]
    pub max_output_tokens: u32,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl EndpointConfig {
    pub fn chat(name: &str, model: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: EndpointKind::Chat,
            base_url: String::new(),
            model: model.to_string(),
            max_context_tokens: DEFAULT_MAX_CONTEXT_TOKENS,
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            api_key_env: None,
        }
    }

    pub fn embedding(name: &str, model: &str) -> Self {
        Self {
            kind: EndpointKind::Embedding,
            ..Self::chat(name, model)
        }
    }

    pub fn with_base_url(mut self, url: &str) -> Self {
        self.base_url = url.to_string();
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_context_tokens == 0 || self.max_output_tokens == 0 {
            return Err(GatewayError::Config(format!(
                "endpoint {:?}: token limits must be positive",
                self.name
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "endpoint {:?}: temperature must be >= 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Read an endpoints file: a JSON array of endpoint objects.
pub fn load_endpoints(path: &Path) -> Result<Vec<EndpointConfig>, GatewayError> {
    let raw = fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    let eps: Vec<EndpointConfig> =
        serde_json::from_str(&raw).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
    for e in &eps {
        e.validate()?;
    }
    Ok(eps)
}

/// What a backend returns for one chat call.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

pub trait Backend: Send + Sync {
    fn chat(&self, endpoint: &EndpointConfig, prompt: &str) -> Result<BackendReply, GatewayError>;
    fn embed(&self, endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

type ChatFn = dyn Fn(&EndpointConfig, &str) -> Result<String, GatewayError> + Send + Sync;

/// Chat backend driven by a closure; embedding falls back to letter
/// frequencies.
pub struct FnBackend {
    f: Box<ChatFn>,
}

impl FnBackend {
    pub fn new(f: impl Fn(&EndpointConfig, &str) -> Result<String, GatewayError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl Backend for FnBackend {
    fn chat(&self, endpoint: &EndpointConfig, prompt: &str) -> Result<BackendReply, GatewayError> {
        let text = (self.f)(endpoint, prompt)?;
        Ok(BackendReply {
            text,
            prompt_tokens: 0,
            completion_tokens: 0,
        })
    }

    fn embed(&self, _endpoint: &EndpointConfig, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        Ok(texts.iter().map(|t| letter_frequency(t)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    /// Relative jitter; 0.2 means each delay is scaled by U(0.8, 1.2).
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// A single attempt, no retries.
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Delay before retry number `retry` (0-based), without jitter.
    pub fn nominal_delay(&self, retry: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(retry as i32))
    }

    fn delay(&self, retry: u32) -> Duration {
        let scale = if self.jitter > 0.0 {
            1.0 + rand::thread_rng().gen_range(-self.jitter..=self.jitter)
        } else {
            1.0
        };
        self.nominal_delay(retry).mul_f64(scale.max(0.0))
    }
}

#[derive(Debug)]
struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatResponse {
    pub endpoint: String,
    pub request_hash: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub cached: bool,
}

/// Stable 256-bit digest of everything that determines a chat reply.
pub fn request_hash(endpoint: &EndpointConfig, prompt: &str) -> String {
    let key = serde_json::json!([
        "chat",
        endpoint.model,
        prompt,
        endpoint.temperature,
        endpoint.max_output_tokens
    ]);
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

fn embedding_key(endpoint: &EndpointConfig, text: &str) -> String {
    let key = serde_json::json!(["embedding", endpoint.model, text]);
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

pub struct Gateway {
    endpoints: BTreeMap<String, EndpointConfig>,
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    permits: Semaphore,
    max_parallel: usize,
    retry: RetryPolicy,
    tokenizer: TokenizerHandle,
}

impl Gateway {
    pub fn new(endpoints: Vec<EndpointConfig>, backend: Arc<dyn Backend>) -> Self {
        Self {
            endpoints: endpoints.into_iter().map(|e| (e.name.clone(), e)).collect(),
            backend,
            cache: Some(ResponseCache::in_memory()),
            permits: Semaphore::new(4),
            max_parallel: 4,
            retry: RetryPolicy::default(),
            tokenizer: TokenizerHandle::builtin(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        let n = n.max(1);
        self.permits = Semaphore::new(n);
        self.max_parallel = n;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_tokenizer(mut self, tokenizer: TokenizerHandle) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn max_parallel(&self) -> usize {
        self.max_parallel
    }

    pub fn endpoint(&self, name: &str) -> Result<&EndpointConfig, GatewayError> {
        self.endpoints
            .get(name)
            .ok_or_else(|| GatewayError::UnknownEndpoint(name.to_string()))
    }

    fn endpoint_of_kind(&self, name: &str, kind: EndpointKind) -> Result<&EndpointConfig, GatewayError> {
        let ep = self.endpoint(name)?;
        if ep.kind != kind {
            return Err(GatewayError::WrongKind {
                name: name.to_string(),
                expected: kind,
            });
        }
        Ok(ep)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut retry = 0;
        loop {
            let result = {
                let _permit = self.permits.acquire();
                call()
            };
            match result {
                Err(e) if e.is_retryable() => {
                    if retry + 1 >= attempts {
                        return Err(GatewayError::Transport(format!(
                            "gave up after {attempts} attempts: {e}"
                        )));
                    }
                    let wait = self.retry.delay(retry);
                    log::warn!("retrying in {wait:?} after: {e}");
                    std::thread::sleep(wait);
                    retry += 1;
                }
                other => return other,
            }
        }
    }

    /// Run one chat completion against the named endpoint.
    pub fn complete(&self, endpoint: &str, prompt: &str) -> Result<ChatResponse, GatewayError> {
        let ep = self.endpoint_of_kind(endpoint, EndpointKind::Chat)?;
        let estimate = self.tokenizer.count(prompt);
        if estimate > ep.max_context_tokens {
            return Err(GatewayError::ContextOverflow {
                endpoint: ep.name.clone(),
                estimate,
                cap: ep.max_context_tokens,
            });
        }
        let hash = request_hash(ep, prompt);
        if let Some(cache) = &self.cache {
            if let Some(CachedValue::Chat {
                text,
                prompt_tokens,
                completion_tokens,
            }) = cache.get(&hash)
            {
                return Ok(ChatResponse {
                    endpoint: ep.name.clone(),
                    request_hash: hash,
                    text,
                    prompt_tokens,
                    completion_tokens,
                    latency_ms: 0,
                    cached: true,
                });
            }
        }
        let started = Instant::now();
        let reply = self.with_retries(|| self.backend.chat(ep, prompt))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        if let Some(cache) = &self.cache {
            cache.put(
                &hash,
                CachedValue::Chat {
                    text: reply.text.clone(),
                    prompt_tokens: reply.prompt_tokens,
                    completion_tokens: reply.completion_tokens,
                },
            )?;
        }
        Ok(ChatResponse {
            endpoint: ep.name.clone(),
            request_hash: hash,
            text: reply.text,
            prompt_tokens: reply.prompt_tokens,
            completion_tokens: reply.completion_tokens,
            latency_ms,
            cached: false,
        })
    }

    /// Embed a batch of texts. Cached per (model, text); only misses reach
    /// the backend, in one call.
    pub fn embed(&self, endpoint: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        let ep = self.endpoint_of_kind(endpoint, EndpointKind::Embedding)?;
        if texts.is_empty() {
            return Err(GatewayError::EmptyBatch);
        }
        let keys: Vec<String> = texts.iter().map(|t| embedding_key(ep, t)).collect();
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            match self.cache.as_ref().and_then(|c| c.get(key)) {
                Some(CachedValue::Embedding { vector }) => out[i] = Some(vector),
                _ => missing.push(i),
            }
        }
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.with_retries(|| self.backend.embed(ep, &batch))?;
            if vectors.len() != batch.len() {
                return Err(GatewayError::Protocol(format!(
                    "asked for {} embeddings, got {}",
                    batch.len(),
                    vectors.len()
                )));
            }
            for (&i, v) in missing.iter().zip(vectors) {
                out[i] = Some(v);
            }
        }
        let out: Vec<Vec<f64>> = out.into_iter().map(|v| v.expect("filled")).collect();
        let dim = out[0].len();
        if out.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::Protocol(
                "embedding dimensions differ within a batch".into(),
            ));
        }
        if let Some(cache) = &self.cache {
            for &i in &missing {
                cache.put(&keys[i], CachedValue::Embedding { vector: out[i].clone() })?;
            }
        }
        Ok(out)
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.as_ref().map(|c| c.stats()).unwrap_or_default()
    }

    pub fn clear_cache(&self) -> Result<(), GatewayError> {
        match &self.cache {
            Some(c) => c.clear(),
            None => Ok(()),
        }
    }
}
