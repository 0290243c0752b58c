//! Completion-service client with a content-addressed disk cache.
//!
//! Every request is keyed by [`cache_key`]; the cache is consulted before the
//! backend, so a finished run can be re-scored offline. Transient backend
//! failures are retried with exponential backoff up to a fixed number of
//! attempts. Concurrent identical requests are serialized on a per-key lock,
//! so only the first reaches the backend.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::promptgen::PromptTemplate;

pub const API_KEY_ENV: &str = "COMPLETION_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    CompletionHttp,
    Echo,
    FixedMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub backend: BackendKind,
    pub model_id: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Vec<String>,
}

impl GenerationRequest {
    pub fn new(backend: BackendKind, model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            backend,
            model_id: model_id.into(),
            prompt: prompt.into(),
            max_tokens: 64,
            temperature: 0.0,
            stop: vec!["\n".to_owned()],
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_tokens == 0 {
            return Err(GenError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GenError::InvalidRequest("temperature must be a nonnegative number".into()));
        }
        Ok(())
    }
}

/// SHA-256 over a versioned, fixed-order JSON rendering of every request field.
pub fn cache_key(request: &GenerationRequest) -> String {
    let canonical = serde_json::to_string(request).expect("request serializes");
    sha256_hex(format!("generation-request/v1\n{canonical}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub image_id: String,
    pub request_digest: String,
    pub raw_completion: String,
    pub caption: String,
    pub empty_caption: bool,
    pub latency_ms: u64,
    pub from_cache: bool,
    /// Backend attempts made by this call; 0 when served from cache.
    pub attempts: u32,
}

/// Trims whitespace, keeps only the first line, then strips matching
/// surrounding quotes (repeatedly, so the result is a fixed point).
/// Returns the caption and whether it is empty.
pub fn postprocess_caption(raw: &str) -> (String, bool) {
    let trimmed = raw.trim();
    let mut caption = trimmed.split('\n').next().unwrap_or("").trim();
    loop {
        let inner = strip_quotes(caption).trim();
        if inner == caption {
            break;
        }
        caption = inner;
    }
    (caption.to_owned(), caption.is_empty())
}

fn strip_quotes(s: &str) -> &str {
    const PAIRS: [(char, char); 4] = [('"', '"'), ('\'', '\''), ('“', '”'), ('‘', '’')];
    for (open, close) in PAIRS {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            return &s[open.len_utf8()..s.len() - close.len_utf8()];
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Rate limiting, server errors, dropped connections.
    #[error("transient: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("{0}")]
    Permanent(String),
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

/// Offline backend answering with the description span of the prompt, followed by a newline.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    template: PromptTemplate,
}

impl EchoBackend {
    pub fn new(template: PromptTemplate) -> Self {
        Self { template }
    }
}

impl Backend for EchoBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let span = self
            .template
            .description_span(&request.prompt)
            .unwrap_or_else(|| request.prompt.lines().next().unwrap_or(""));
        Ok(format!("{span}\n"))
    }
}

/// Offline backend answering from a prompt → completion table.
#[derive(Debug, Clone, Default)]
pub struct FixedMapBackend {
    answers: HashMap<String, String>,
}

impl FixedMapBackend {
    pub fn new(answers: HashMap<String, String>) -> Self {
        Self { answers }
    }
}

impl Backend for FixedMapBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.answers
            .get(&request.prompt)
            .cloned()
            .ok_or_else(|| BackendError::Permanent("no fixed completion for this prompt".into()))
    }
}

/// How request fields map onto a vendor's JSON body and where the text sits in the response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpMapping {
    pub prompt_field: String,
    pub model_field: String,
    pub max_tokens_field: String,
    pub temperature_field: String,
    pub stop_field: String,
    /// JSON pointer to the completion text in the response body.
    pub response_pointer: String,
    pub auth_header: String,
    pub auth_scheme: String,
}

impl Default for HttpMapping {
    fn default() -> Self {
        Self {
            prompt_field: "prompt".into(),
            model_field: "model".into(),
            max_tokens_field: "max_tokens".into(),
            temperature_field: "temperature".into(),
            stop_field: "stop".into(),
            response_pointer: "/choices/0/text".into(),
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer".into(),
        }
    }
}

pub struct HttpBackend {
    endpoint: String,
    api_key: String,
    mapping: HttpMapping,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, mapping: HttpMapping, timeout: Duration) -> Result<Self, GenError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GenError::InvalidRequest(e.to_string()))?;
        Ok(Self { endpoint: endpoint.into(), api_key: api_key.into(), mapping, http })
    }

    fn body(&self, request: &GenerationRequest) -> serde_json::Value {
        let m = &self.mapping;
        let mut body = serde_json::Map::new();
        body.insert(m.model_field.clone(), request.model_id.clone().into());
        body.insert(m.prompt_field.clone(), request.prompt.clone().into());
        body.insert(m.max_tokens_field.clone(), request.max_tokens.into());
        body.insert(m.temperature_field.clone(), request.temperature.into());
        body.insert(m.stop_field.clone(), request.stop.clone().into());
        body.into()
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let auth = if self.mapping.auth_scheme.is_empty() {
            self.api_key.clone()
        } else {
            format!("{} {}", self.mapping.auth_scheme, self.api_key)
        };
        let response = self
            .http
            .post(&self.endpoint)
            .header(self.mapping.auth_header.as_str(), auth)
            .header("Content-Type", "application/json")
            .body(self.body(request).to_string())
            .send()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| BackendError::Transient(e.to_string()))?;
        match status.as_u16() {
            200..=299 => {}
            401 | 403 => return Err(BackendError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => return Err(BackendError::Transient(format!("HTTP {status}"))),
            _ => return Err(BackendError::Permanent(format!("HTTP {status}: {text}"))),
        }
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Permanent(format!("response is not JSON: {e}")))?;
        json.pointer(&self.mapping.response_pointer)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Permanent(format!("no text at {}", self.mapping.response_pointer)))
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("cache error at {path}: {source}")]
    Cache { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): `base * 2^(retry-1)`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Token bucket limiting requests per second, shared by all workers.
#[derive(Debug)]
pub struct TokenBucket {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        Self { rate_per_sec, capacity, state: Mutex::new((capacity, Instant::now())) }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.rate_per_sec;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.rate_per_sec)
            };
            std::thread::sleep(wait);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: GenerationRequest,
    raw_completion: String,
    created_unix_ms: u128,
    fetch_latency_ms: u64,
    attempts: u32,
}

/// One JSON file per request digest under `<root>/<first two hex chars>/`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    fn load(&self, key: &str) -> Option<CacheEntry> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    fn store(&self, entry: &CacheEntry) -> Result<(), GenError> {
        let path = self.path_for(&entry.key);
        let dir = path.parent().expect("cache path has parent");
        let io = |source| GenError::Cache { path: path.clone(), source };
        fs::create_dir_all(dir).map_err(io)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&serde_json::to_vec_pretty(entry).expect("entry serializes"))
            .map_err(io)?;
        tmp.persist(&path).map_err(|e| io(e.error))?;
        Ok(())
    }
}

pub struct Client {
    backend: Arc<dyn Backend>,
    cache: DiskCache,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    backend_calls: AtomicUsize,
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>, cache: DiskCache, retry: RetryPolicy) -> Self {
        Self {
            backend,
            cache,
            retry,
            limiter: None,
            inflight: Mutex::new(HashMap::new()),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_rate_limit(mut self, bucket: TokenBucket) -> Self {
        self.limiter = Some(bucket);
        self
    }

    /// Number of backend invocations made so far (each retry counts).
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, image_id: &str, request: &GenerationRequest) -> Result<GenerationRecord, GenError> {
        request.validate()?;
        let started = Instant::now();
        let key = cache_key(request);
        let key_lock = {
            let mut map = self.inflight.lock().expect("inflight lock");
            Arc::clone(map.entry(key.clone()).or_default())
        };
        let _guard = key_lock.lock().expect("key lock");

        if let Some(hit) = self.cache.load(&key) {
            return Ok(record(image_id, key, hit.raw_completion, started.elapsed(), true, 0));
        }

        let (raw, attempts) = self.fetch(request)?;
        let latency = started.elapsed();
        self.cache.store(&CacheEntry {
            key: key.clone(),
            request: request.clone(),
            raw_completion: raw.clone(),
            created_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            fetch_latency_ms: latency.as_millis() as u64,
            attempts,
        })?;
        Ok(record(image_id, key, raw, latency, false, attempts))
    }

    fn fetch(&self, request: &GenerationRequest) -> Result<(String, u32), GenError> {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(bucket) = &self.limiter {
                bucket.acquire();
            }
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(request) {
                Ok(raw) => return Ok((raw, attempt)),
                Err(BackendError::Auth(msg)) => return Err(GenError::Auth(msg)),
                Err(BackendError::Permanent(msg)) => return Err(GenError::Rejected(msg)),
                Err(BackendError::Transient(msg)) => {
                    if attempt >= max {
                        return Err(GenError::Exhausted { attempts: attempt, last: msg });
                    }
                    log::warn!("attempt {attempt} failed ({msg}), retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }
}

fn record(image_id: &str, key: String, raw: String, latency: Duration, from_cache: bool, attempts: u32) -> GenerationRecord {
    let (caption, empty_caption) = postprocess_caption(&raw);
    GenerationRecord {
        image_id: image_id.to_owned(),
        request_digest: key,
        raw_completion: raw,
        caption,
        empty_caption,
        latency_ms: latency.as_millis() as u64,
        from_cache,
        attempts,
    }
}

/// Builds a fixed-map table from `image_id → completion` lines and the prompts
/// each image would be sent with.
pub fn fixed_answers<'a>(
    completions: &BTreeMap<String, String>,
    prompts: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> HashMap<String, String> {
    prompts
        .into_iter()
        .filter_map(|(id, prompt)| completions.get(id).map(|c| (prompt.to_owned(), c.clone())))
        .collect()
}
