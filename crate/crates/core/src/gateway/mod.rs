//! Uniform access to chat, completion-with-logprobs and embedding backends.
//!
//! A [`Gateway`] owns at most one route per capability. Each route pairs a
//! [`ModelEndpoint`] with a [`Backend`] and its own in-flight limit. Requests go
//! through a shared response cache and a retry policy; every logical request
//! is recorded in the call log.

mod cache;
pub mod http;
mod limiter;
pub mod mock;
mod retry;
pub mod template;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheMode, ResponseCache};
pub use limiter::Limiter;
pub use retry::RetryPolicy;
pub use template::{render_prompt, ChatTemplate};

use crate::interaction::Role;
use crate::rng::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Chat,
    Completion,
    Embedding,
}

impl std::fmt::Display for EndpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EndpointKind::Chat => "chat",
            EndpointKind::Completion => "completion",
            EndpointKind::Embedding => "embedding",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationParams {
    pub max_output_tokens: usize,
    pub top_k_logprobs: usize,
    /// Exposed for completeness; every metric decodes greedily.
    pub temperature: f64,
    pub stop: Vec<String>,
    /// Text of the end-of-sequence token when a backend reports it.
    pub eos_token: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_output_tokens: 256,
            top_k_logprobs: 5,
            temperature: 0.0,
            stop: Vec::new(),
            eos_token: "<|eot_id|>".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub kind: EndpointKind,
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default = "default_context_length")]
    pub context_length: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_context_length() -> usize {
    8192
}
fn default_parallelism() -> usize {
    4
}
fn default_timeout_ms() -> u64 {
    60_000
}

impl ModelEndpoint {
    pub fn new(
        kind: EndpointKind,
        base_url: impl Into<String>,
        model_name: impl Into<String>,
    ) -> Self {
        Self {
            kind,
            base_url: base_url.into(),
            model_name: model_name.into(),
            params: GenerationParams::default(),
            context_length: default_context_length(),
            parallelism: default_parallelism(),
            timeout_ms: default_timeout_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.context_length == 0 {
            return Err("context_length must be > 0".into());
        }
        if self.params.max_output_tokens == 0 {
            return Err("params.max_output_tokens must be > 0".into());
        }
        if self.parallelism == 0 {
            return Err("parallelism must be > 0".into());
        }
        if self.kind == EndpointKind::Completion && self.params.top_k_logprobs < 2 {
            return Err("params.top_k_logprobs must be >= 2 for completion endpoints".into());
        }
        Ok(())
    }

    /// Stable identity used in cache keys.
    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.kind,
            "base_url": self.base_url,
            "model": self.model_name,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One generated token with its top-k alternatives, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub token: String,
    pub logprob: f64,
    pub alternatives: Vec<TokenLogprob>,
}

/// Descending logprob, ties broken by ascending token bytes.
pub fn sort_alternatives(alts: &mut [TokenLogprob]) {
    alts.sort_by(|a, b| {
        b.logprob
            .total_cmp(&a.logprob)
            .then_with(|| a.token.as_bytes().cmp(b.token.as_bytes()))
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    /// End of sequence (explicit token or the model simply stopped).
    Eos,
    /// A stop sequence was produced.
    Stop,
    /// Token budget reached.
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub steps: Vec<TokenStep>,
    pub finish: FinishReason,
}

impl Completion {
    /// Generated text, without a trailing end-of-sequence token.
    pub fn text(&self, eos_token: &str) -> String {
        self.steps
            .iter()
            .filter(|s| s.token != eos_token)
            .map(|s| s.token.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub norm: f64,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transient failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transient {
        status: Option<u16>,
        message: String,
    },
    #[error("HTTP {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no {0} endpoint configured")]
    NoEndpoint(EndpointKind),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("context overflow: prompt has {tokens} tokens, context length is {limit}")]
    ContextOverflow { tokens: usize, limit: usize },
    #[error("permanent error: HTTP {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("transport error after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("backend error: {0}")]
    Backend(String),
}

/// An inference backend. Implementations perform exactly one attempt per call;
/// retries, caching and concurrency limits live in [`Gateway`].
pub trait Backend: Send + Sync {
    fn chat(
        &self,
        endpoint: &ModelEndpoint,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError>;

    fn complete(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &str,
        max_tokens: usize,
    ) -> Result<Completion, BackendError>;

    fn embed(
        &self,
        endpoint: &ModelEndpoint,
        texts: &[String],
    ) -> Result<Vec<Vec<f64>>, BackendError>;

    /// Prompt length in backend tokens, when the backend can tell locally.
    fn prompt_tokens(&self, _prompt: &str) -> Option<usize> {
        None
    }

    /// Whether completions carry top-k logprobs.
    fn supports_logprobs(&self) -> bool {
        true
    }
}

/// One logical gateway request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub kind: EndpointKind,
    pub cache_hit: bool,
    /// Backend attempts made (0 on a cache hit).
    pub attempts: u32,
    pub ok: bool,
}

impl CallRecord {
    pub fn retries(&self) -> u32 {
        self.attempts.saturating_sub(1)
    }
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
    retries: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
}

struct Route {
    endpoint: ModelEndpoint,
    backend: Arc<dyn Backend>,
    limiter: Limiter,
}

pub struct Gateway {
    routes: [Option<Route>; 3],
    cache: Arc<ResponseCache>,
    cache_mode: CacheMode,
    retry: RetryPolicy,
    counters: Arc<Counters>,
    log: Arc<Mutex<Vec<CallRecord>>>,
}

fn slot(kind: EndpointKind) -> usize {
    match kind {
        EndpointKind::Chat => 0,
        EndpointKind::Completion => 1,
        EndpointKind::Embedding => 2,
    }
}

impl Default for Gateway {
    fn default() -> Self {
        Self::new()
    }
}

impl Gateway {
    pub fn new() -> Self {
        Self {
            routes: [None, None, None],
            cache: Arc::new(ResponseCache::in_memory()),
            cache_mode: CacheMode::ReadWrite,
            retry: RetryPolicy::default(),
            counters: Arc::default(),
            log: Arc::default(),
        }
    }

    pub fn with_route(
        mut self,
        endpoint: ModelEndpoint,
        backend: Arc<dyn Backend>,
    ) -> Result<Self, GatewayError> {
        endpoint.validate().map_err(GatewayError::Precondition)?;
        let limiter = Limiter::new(endpoint.parallelism);
        let idx = slot(endpoint.kind);
        self.routes[idx] = Some(Route {
            endpoint,
            backend,
            limiter,
        });
        Ok(self)
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_cache_mode(mut self, mode: CacheMode) -> Self {
        self.cache_mode = mode;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// A view sharing routes, cache, counters and call log but using a
    /// different cache mode (used to re-query the model for variance studies).
    pub fn view(&self, mode: CacheMode) -> Gateway {
        Gateway {
            routes: [
                self.routes[0].as_ref().map(Route::share),
                self.routes[1].as_ref().map(Route::share),
                self.routes[2].as_ref().map(Route::share),
            ],
            cache: self.cache.clone(),
            cache_mode: mode,
            retry: self.retry.clone(),
            counters: self.counters.clone(),
            log: self.log.clone(),
        }
    }

    pub fn endpoint(&self, kind: EndpointKind) -> Option<&ModelEndpoint> {
        self.routes[slot(kind)].as_ref().map(|r| &r.endpoint)
    }

    fn route(&self, kind: EndpointKind) -> Result<&Route, GatewayError> {
        self.routes[slot(kind)]
            .as_ref()
            .ok_or(GatewayError::NoEndpoint(kind))
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.counters.requests.load(Ordering::Relaxed),
            cache_hits: self.counters.cache_hits.load(Ordering::Relaxed),
            backend_calls: self.counters.backend_calls.load(Ordering::Relaxed),
            retries: self.counters.retries.load(Ordering::Relaxed),
        }
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    /// Highest number of simultaneous backend calls seen on a route.
    pub fn max_in_flight(&self, kind: EndpointKind) -> usize {
        self.routes[slot(kind)]
            .as_ref()
            .map(|r| r.limiter.max_observed())
            .unwrap_or(0)
    }

    fn record(&self, rec: CallRecord) {
        self.counters.requests.fetch_add(1, Ordering::Relaxed);
        if rec.cache_hit {
            self.counters.cache_hits.fetch_add(1, Ordering::Relaxed);
        }
        self.counters
            .backend_calls
            .fetch_add(rec.attempts as u64, Ordering::Relaxed);
        self.counters
            .retries
            .fetch_add(rec.retries() as u64, Ordering::Relaxed);
        self.log.lock().expect("call log poisoned").push(rec);
    }

    fn cache_key(endpoint: &ModelEndpoint, request: &serde_json::Value) -> String {
        let body = serde_json::json!({ "endpoint": endpoint.identity(), "request": request });
        sha256_hex(body.to_string())
    }

    fn cached<T: serde::de::DeserializeOwned>(&self, key: &str) -> Option<T> {
        if !self.cache_mode.reads() {
            return None;
        }
        self.cache
            .get(key)
            .and_then(|bytes| serde_json::from_slice(&bytes).ok())
    }

    fn store<T: Serialize>(&self, key: &str, value: &T) {
        if self.cache_mode.writes() {
            if let Ok(bytes) = serde_json::to_vec(value) {
                if let Err(e) = self.cache.put(key, bytes) {
                    log::warn!("cache write failed: {e}");
                }
            }
        }
    }

    /// Runs one request through limiter and retry policy.
    fn attempt<T>(
        &self,
        route: &Route,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> (Result<T, GatewayError>, u32) {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let result = {
                let _permit = route.limiter.acquire();
                op()
            };
            match result {
                Ok(v) => return (Ok(v), attempts),
                Err(BackendError::Transient { status, message }) => {
                    if attempts >= self.retry.max_attempts {
                        let message = match status {
                            Some(s) => format!("HTTP {s}: {message}"),
                            None => message,
                        };
                        return (Err(GatewayError::Transport { attempts, message }), attempts);
                    }
                    log::debug!("transient failure (attempt {attempts}): {message}");
                    std::thread::sleep(self.retry.delay(attempts));
                }
                Err(BackendError::Permanent { status, body }) => {
                    return (Err(GatewayError::Permanent { status, body }), attempts)
                }
                Err(BackendError::Capability(m)) => {
                    return (Err(GatewayError::Capability(m)), attempts)
                }
                Err(BackendError::Other(m)) => return (Err(GatewayError::Backend(m)), attempts),
            }
        }
    }

    /// Chat generation through the chat route.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        if messages.is_empty() {
            return Err(GatewayError::Precondition(
                "messages must be non-empty".into(),
            ));
        }
        let route = self.route(EndpointKind::Chat)?;
        let ep = &route.endpoint;
        let key = Self::cache_key(
            ep,
            &serde_json::json!({
                "messages": messages,
                "temperature": ep.params.temperature,
            }),
        );
        if let Some(hit) = self.cached::<String>(&key) {
            self.record(CallRecord {
                kind: EndpointKind::Chat,
                cache_hit: true,
                attempts: 0,
                ok: true,
            });
            return Ok(hit);
        }
        let (result, attempts) = self.attempt(route, || route.backend.chat(ep, messages));
        self.record(CallRecord {
            kind: EndpointKind::Chat,
            cache_hit: false,
            attempts,
            ok: result.is_ok(),
        });
        let reply = result?;
        self.store(&key, &reply);
        Ok(reply)
    }

    /// Convenience wrapper for a single user message.
    pub fn ask(&self, prompt: &str) -> Result<String, GatewayError> {
        self.chat(&[ChatMessage::user(prompt)])
    }

    /// Greedy continuation of `prefix` with per-token top-k logprobs. The
    /// endpoint's `max_output_tokens` caps `max_tokens`.
    pub fn complete_with_logprobs(
        &self,
        prefix: &str,
        max_tokens: Option<usize>,
    ) -> Result<Completion, GatewayError> {
        let route = self.route(EndpointKind::Completion)?;
        let ep = &route.endpoint;
        if !route.backend.supports_logprobs() {
            return Err(GatewayError::Capability(format!(
                "backend for {} does not return logprobs",
                ep.model_name
            )));
        }
        if let Some(tokens) = route.backend.prompt_tokens(prefix) {
            if tokens > ep.context_length {
                return Err(GatewayError::ContextOverflow {
                    tokens,
                    limit: ep.context_length,
                });
            }
        }
        let max_tokens = max_tokens
            .unwrap_or(ep.params.max_output_tokens)
            .min(ep.params.max_output_tokens);
        let key = Self::cache_key(
            ep,
            &serde_json::json!({
                "prompt": prefix,
                "max_tokens": max_tokens,
                "logprobs": ep.params.top_k_logprobs,
                "stop": ep.params.stop,
                "eos": ep.params.eos_token,
            }),
        );
        if let Some(hit) = self.cached::<Completion>(&key) {
            self.record(CallRecord {
                kind: EndpointKind::Completion,
                cache_hit: true,
                attempts: 0,
                ok: true,
            });
            return Ok(hit);
        }
        let (result, attempts) =
            self.attempt(route, || route.backend.complete(ep, prefix, max_tokens));
        self.record(CallRecord {
            kind: EndpointKind::Completion,
            cache_hit: false,
            attempts,
            ok: result.is_ok(),
        });
        let mut completion = result?;
        let k = ep.params.top_k_logprobs;
        for step in &mut completion.steps {
            if !step.logprob.is_finite() || step.alternatives.iter().any(|a| !a.logprob.is_finite())
            {
                return Err(GatewayError::Backend(
                    "non-finite logprob in response".into(),
                ));
            }
            sort_alternatives(&mut step.alternatives);
            step.alternatives.truncate(k);
        }
        self.store(&key, &completion);
        Ok(completion)
    }

    /// Embeds each text; results are cached per (model, text) and duplicate
    /// misses are sent to the backend once.
    pub fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::Precondition("texts must be non-empty".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(GatewayError::Precondition(format!(
                "text at index {i} is empty"
            )));
        }
        let route = self.route(EndpointKind::Embedding)?;
        let ep = &route.endpoint;
        let keys: Vec<String> = texts
            .iter()
            .map(|t| Self::cache_key(ep, &serde_json::json!({ "input": t })))
            .collect();
        let mut out: Vec<Option<Vec<f64>>> = keys.iter().map(|k| self.cached(k)).collect();
        let mut missing: Vec<String> = Vec::new();
        for (i, v) in out.iter().enumerate() {
            if v.is_none() && !missing.contains(&texts[i]) {
                missing.push(texts[i].clone());
            }
        }
        let hits = out.iter().filter(|v| v.is_some()).count();
        if missing.is_empty() {
            self.record(CallRecord {
                kind: EndpointKind::Embedding,
                cache_hit: true,
                attempts: 0,
                ok: true,
            });
        } else {
            let (result, attempts) = self.attempt(route, || route.backend.embed(ep, &missing));
            self.record(CallRecord {
                kind: EndpointKind::Embedding,
                cache_hit: false,
                attempts,
                ok: result.is_ok(),
            });
            let vectors = result?;
            if vectors.len() != missing.len() {
                return Err(GatewayError::Backend(format!(
                    "expected {} embeddings, got {}",
                    missing.len(),
                    vectors.len()
                )));
            }
            for (text, vector) in missing.iter().zip(vectors) {
                let key = Self::cache_key(ep, &serde_json::json!({ "input": text }));
                self.store(&key, &vector);
                for (i, t) in texts.iter().enumerate() {
                    if out[i].is_none() && t == text {
                        out[i] = Some(vector.clone());
                    }
                }
            }
        }
        log::trace!("embed_batch: {hits}/{} cached", texts.len());
        let vectors: Vec<EmbeddingVector> = out
            .into_iter()
            .map(|v| EmbeddingVector::new(v.expect("filled above")))
            .collect();
        let dim = vectors[0].dim();
        if vectors.iter().any(|v| v.dim() != dim) {
            return Err(GatewayError::Backend("embedding dimensions differ".into()));
        }
        Ok(vectors)
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(self.embed_batch(&[text.to_string()])?.remove(0))
    }
}

impl Route {
    fn share(&self) -> Route {
        Route {
            endpoint: self.endpoint.clone(),
            backend: self.backend.clone(),
            limiter: self.limiter.clone(),
        }
    }
}
