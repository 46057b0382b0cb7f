//! Chat and embedding access with a disk cache, bounded fan-out, retries, and
//! a scripted mock backend.

mod cache;
mod http;
mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::text::normalize_label;

pub use cache::DiskCache;
pub use http::HttpBackend;
pub use mock::{MockBackend, Scenario, ScenarioRule};

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected provider payload: {0}")]
    Protocol(String),
    #[error("mock scenario has no rule matching tag {tag:?} and no default reply")]
    NoRule { tag: String },
    #[error("scripted provider failure: {0}")]
    Scripted(String),
    #[error("provider configuration: {0}")]
    Config(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },
    #[error("cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LlmError {
    fn retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output: u32,
    /// Pipeline stage label, e.g. `node_select`; used by mock rules and logs.
    pub tag: String,
}

impl ChatRequest {
    pub fn new(tag: &str, messages: Vec<ChatMessage>, temperature: f64) -> Self {
        ChatRequest {
            messages,
            temperature,
            max_output: 1024,
            tag: tag.to_string(),
        }
    }

    /// All message contents joined by newlines, as seen by mock matchers.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top: Vec<TopLogprob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_scores: Option<Vec<TokenScore>>,
    pub provider_id: String,
    #[serde(default)]
    pub cached: bool,
}

/// A single-attempt provider. Retries, caching, and concurrency limits are
/// applied by [`Gateway`].
pub trait Backend: Send + Sync {
    fn provider_id(&self) -> &str;
    fn model(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpOpenaiCompatible,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Falls back to `KGCOT_API_BASE` when unset.
    pub base_url: Option<String>,
    pub model: String,
    pub embedding_model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    /// Mock scenario file.
    pub scenario: Option<PathBuf>,
    pub max_in_flight: usize,
    /// Total attempts per call, including the first.
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Falls back to `KGCOT_CACHE_DIR`; no caching when both are unset.
    pub cache_dir: Option<PathBuf>,
    pub embed_batch: usize,
    /// Request per-token log-probabilities from HTTP providers.
    pub logprobs: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: None,
            model: "gpt-4o".into(),
            embedding_model: "text-embedding-3-small".into(),
            api_key_env: "KGCOT_API_KEY".into(),
            scenario: None,
            max_in_flight: 4,
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 120,
            cache_dir: None,
            embed_batch: 64,
            logprobs: false,
        }
    }
}

/// Counting semaphore bounding outstanding backend calls.
#[derive(Debug)]
pub struct Limiter {
    permits: Mutex<usize>,
    freed: Condvar,
    capacity: usize,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Limiter {
            permits: Mutex::new(capacity),
            freed: Condvar::new(),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.freed.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut free = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub chat_calls: u64,
    pub chat_cache_hits: u64,
    pub embed_calls: u64,
    pub embed_cache_hits: u64,
}

impl GatewayStats {
    pub fn provider_calls(&self) -> u64 {
        self.chat_calls + self.embed_calls
    }
}

#[derive(Default)]
struct Counters {
    chat_calls: AtomicU64,
    chat_cache_hits: AtomicU64,
    embed_calls: AtomicU64,
    embed_cache_hits: AtomicU64,
}

/// Shared provider handle: caching, retries with exponential backoff, and a
/// process-wide in-flight bound.
pub struct Gateway {
    backend: Box<dyn Backend>,
    cache: Option<DiskCache>,
    limiter: Limiter,
    attempts: u32,
    backoff: Duration,
    embed_batch: usize,
    counters: Counters,
    embed_memo: Mutex<HashMap<String, Vec<f64>>>,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Gateway {
            backend,
            cache: None,
            limiter: Limiter::new(4),
            attempts: 3,
            backoff: Duration::from_millis(500),
            embed_batch: 64,
            counters: Counters::default(),
            embed_memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_cache(mut self, cache: DiskCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn with_retries(mut self, attempts: u32, backoff: Duration) -> Self {
        self.attempts = attempts.max(1);
        self.backoff = backoff;
        self
    }

    pub fn with_embed_batch(mut self, n: usize) -> Self {
        self.embed_batch = n.max(1);
        self
    }

    /// Build from configuration, resolving env fallbacks for endpoint, key, and cache.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, LlmError> {
        let backend: Box<dyn Backend> = match config.kind {
            ProviderKind::Mock => {
                let path = config
                    .scenario
                    .as_ref()
                    .ok_or_else(|| LlmError::Config("mock provider requires a scenario file".into()))?;
                Box::new(MockBackend::from_file(path)?)
            }
            ProviderKind::HttpOpenaiCompatible => Box::new(HttpBackend::from_config(config)?),
        };
        let mut gw = Gateway::new(backend)
            .with_max_in_flight(config.max_in_flight)
            .with_retries(config.retries, Duration::from_millis(config.backoff_ms))
            .with_embed_batch(config.embed_batch);
        let cache_dir = config
            .cache_dir
            .clone()
            .or_else(|| std::env::var_os("KGCOT_CACHE_DIR").map(PathBuf::from));
        if let Some(dir) = cache_dir {
            gw = gw.with_cache(DiskCache::open(dir)?);
        }
        Ok(gw)
    }

    pub fn provider_id(&self) -> &str {
        self.backend.provider_id()
    }

    pub fn model(&self) -> &str {
        self.backend.model()
    }

    pub fn max_in_flight(&self) -> usize {
        self.limiter.capacity()
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            chat_calls: self.counters.chat_calls.load(Ordering::Relaxed),
            chat_cache_hits: self.counters.chat_cache_hits.load(Ordering::Relaxed),
            embed_calls: self.counters.embed_calls.load(Ordering::Relaxed),
            embed_cache_hits: self.counters.embed_cache_hits.load(Ordering::Relaxed),
        }
    }

    fn chat_key(&self, request: &ChatRequest) -> serde_json::Value {
        serde_json::json!({
            "provider": self.backend.provider_id(),
            "model": self.backend.model(),
            "messages": request.messages,
            "temperature": request.temperature,
        })
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::Config("chat request without messages".into()));
        }
        let key = self.chat_key(request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get::<ChatResponse>(&key) {
                self.counters.chat_cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(ChatResponse { cached: true, ..hit });
            }
        }
        let response = self.with_retry(|| {
            let _permit = self.limiter.acquire();
            self.counters.chat_calls.fetch_add(1, Ordering::Relaxed);
            self.backend.chat(request)
        })?;
        if let Some(cache) = &self.cache {
            cache.put(&key, request, &response)?;
        }
        log::debug!("chat [{}] answered by {}", request.tag, response.provider_id);
        Ok(ChatResponse {
            cached: false,
            ..response
        })
    }

    /// One vector per input text, in input order. Texts are normalized before
    /// embedding, so case and spacing variants share a vector.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, LlmError> {
        let normalized: Vec<String> = texts.iter().map(|t| normalize_label(t)).collect();
        let mut missing: Vec<String> = Vec::new();
        {
            let memo = self.embed_memo.lock().unwrap_or_else(|e| e.into_inner());
            for t in &normalized {
                if !memo.contains_key(t) && !missing.contains(t) {
                    missing.push(t.clone());
                }
            }
        }
        let mut fetched: Vec<(String, Vec<f64>)> = Vec::new();
        let mut to_call: Vec<String> = Vec::new();
        for t in missing {
            let hit = self
                .cache
                .as_ref()
                .and_then(|c| c.get::<Vec<f64>>(&self.embed_key(&t)));
            match hit {
                Some(v) => {
                    self.counters.embed_cache_hits.fetch_add(1, Ordering::Relaxed);
                    fetched.push((t, v));
                }
                None => to_call.push(t),
            }
        }
        for batch in to_call.chunks(self.embed_batch) {
            let vectors = self.with_retry(|| {
                let _permit = self.limiter.acquire();
                self.counters.embed_calls.fetch_add(1, Ordering::Relaxed);
                self.backend.embed(batch)
            })?;
            if vectors.len() != batch.len() {
                return Err(LlmError::Protocol(format!(
                    "{} embeddings returned for {} inputs",
                    vectors.len(),
                    batch.len()
                )));
            }
            for (t, v) in batch.iter().zip(vectors) {
                if let Some(cache) = &self.cache {
                    cache.put(&self.embed_key(t), t, &v)?;
                }
                fetched.push((t.clone(), v));
            }
        }
        let mut memo = self.embed_memo.lock().unwrap_or_else(|e| e.into_inner());
        memo.extend(fetched);
        let out: Vec<Vec<f64>> = normalized.iter().map(|t| memo[t].clone()).collect();
        if let Some(first) = out.first() {
            if out.iter().any(|v| v.len() != first.len()) {
                return Err(LlmError::Protocol("embedding dimensions differ".into()));
            }
        }
        Ok(out)
    }

    fn embed_key(&self, normalized: &str) -> serde_json::Value {
        serde_json::json!({
            "kind": "embedding",
            "provider": self.backend.provider_id(),
            "model": self.backend.model(),
            "text": normalized,
        })
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match call() {
                Ok(v) => return Ok(v),
                Err(e) if e.retryable() && attempt < self.attempts => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt - 1);
                    log::warn!("provider call failed (attempt {attempt}/{}): {e}; retrying in {delay:?}", self.attempts);
                    std::thread::sleep(delay);
                }
                Err(e) if e.retryable() => {
                    return Err(LlmError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Run `f` over `items` on up to `workers` threads; results keep input order.
pub fn fan_out<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| {
            s.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("worker finished every item")
        })
        .collect()
}

/// Cosine similarity clamped to [-1, 1]; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}
