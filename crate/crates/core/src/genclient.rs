//! Chat-style generation client with a content-addressed on-disk cache.
//!
//! Every request hashes to a [`GenerationCacheKey`]. A cache hit is served
//! from `<cache_dir>/<key>.txt` without touching the network; a miss calls
//! the endpoint, stores the raw text and a `<key>.json` sidecar describing
//! the request, and returns the stored text. Concurrent writers of the same
//! key resolve to whichever response landed first.

use crate::limit::InFlightLimit;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_uri: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated generations of the same prompt.
    pub batch_tag: u32,
}

impl GenerationRequest {
    pub fn new(model_name: impl Into<String>, prompt: impl Into<String>) -> Self {
        GenerationRequest {
            model_name: model_name.into(),
            system: None,
            prompt: prompt.into(),
            image_uri: None,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: 512,
            batch_tag: 0,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.prompt.trim().is_empty() {
            return Err(GenError::InvalidRequest("prompt is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GenError::InvalidRequest(format!("temperature {} must be finite and >= 0", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(GenError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn cache_key(&self) -> GenerationCacheKey {
        fn field(h: &mut Sha256, tag: u8, bytes: &[u8]) {
            h.update([tag]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        h.update(b"cfq-gen-v1");
        field(&mut h, 1, self.model_name.as_bytes());
        match &self.system {
            Some(s) => field(&mut h, 2, s.as_bytes()),
            None => h.update([0x82]),
        }
        field(&mut h, 3, self.prompt.as_bytes());
        match &self.image_uri {
            Some(u) => field(&mut h, 4, u.as_bytes()),
            None => h.update([0x84]),
        }
        field(&mut h, 5, &self.temperature.to_bits().to_le_bytes());
        field(&mut h, 6, &self.max_tokens.to_le_bytes());
        field(&mut h, 7, &self.batch_tag.to_le_bytes());
        GenerationCacheKey(hex::encode(h.finalize()))
    }
}

/// Hex SHA-256 digest of a request; also the cache file stem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GenerationCacheKey(pub String);

impl fmt::Display for GenerationCacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("generation cache miss for key {key} (offline)")]
    CacheMiss { key: GenerationCacheKey },
    #[error("no generation endpoint configured and no cached response for key {key}")]
    NoEndpoint { key: GenerationCacheKey },
    #[error("generation request {key} failed after {attempts} attempts: {message}")]
    Transport { key: GenerationCacheKey, attempts: u32, message: String },
    #[error("generation cache {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("generation produced no usable sentences")]
    EmptyGeneration,
    #[error("endpoint does not accept image attachments")]
    NoVisionCapability,
}

impl GenError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, GenError::Transport { .. })
    }
}

#[derive(Debug)]
pub struct GenerationCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl GenerationCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GenError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| GenError::Cache { path: dir.clone(), source })?;
        Ok(GenerationCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn response_path(&self, key: &GenerationCacheKey) -> PathBuf {
        self.dir.join(format!("{key}.txt"))
    }

    pub fn get(&self, key: &GenerationCacheKey) -> Result<Option<String>, GenError> {
        let path = self.response_path(key);
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(GenError::Cache { path, source }),
        }
    }

    /// Stores `text` unless the key already has a value; returns whichever
    /// value the cache holds afterwards.
    pub fn put(&self, request: &GenerationRequest, text: &str) -> Result<String, GenError> {
        let key = request.cache_key();
        let final_path = self.response_path(&key);
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| GenError::Cache { path, source }
        };

        let sidecar = self.dir.join(format!("{key}.json"));
        if !sidecar.exists() {
            let mut body = serde_json::to_string_pretty(request).expect("request serializes");
            body.push('\n');
            let tmp = self.tmp_path(&key);
            std::fs::write(&tmp, body).map_err(io(&tmp))?;
            // Sidecars are informational; a lost race leaves an identical file.
            let _ = std::fs::rename(&tmp, &sidecar);
        }

        let tmp = self.tmp_path(&key);
        std::fs::write(&tmp, text).map_err(io(&tmp))?;
        let linked = std::fs::hard_link(&tmp, &final_path);
        let _ = std::fs::remove_file(&tmp);
        match linked {
            Ok(()) => Ok(text.to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                std::fs::read_to_string(&final_path).map_err(io(&final_path))
            }
            Err(source) => Err(GenError::Cache { path: final_path, source }),
        }
    }

    fn tmp_path(&self, key: &GenerationCacheKey) -> PathBuf {
        let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
        self.dir.join(format!(".tmp-{key}-{}-{n}", std::process::id()))
    }
}

/// Sends one request to a generation endpoint and returns the raw text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, String>;

    fn supports_images(&self) -> bool;
}

/// How an image attachment travels to the endpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageMode {
    /// Endpoint is text-only.
    #[default]
    None,
    /// Image passed as its URI.
    Uri,
    /// Local file read and inlined as a base64 data URL.
    Base64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default = "default_model")]
    pub model: String,
    /// Literal endpoint URL; falls back to the `endpoint_env` variable.
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_endpoint_env")]
    pub endpoint_env: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    pub cache_dir: PathBuf,
    /// Never touch the network; cache misses are errors.
    #[serde(default)]
    pub offline: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub image_mode: ImageMode,
}

fn default_model() -> String {
    "gpt-3.5-turbo".into()
}
fn default_endpoint_env() -> String {
    "CFQ_CHAT_URL".into()
}
fn default_key_env() -> String {
    "CFQ_API_KEY".into()
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}

impl GenerationConfig {
    pub fn offline(cache_dir: impl Into<PathBuf>) -> Self {
        GenerationConfig {
            model: default_model(),
            endpoint: None,
            endpoint_env: default_endpoint_env(),
            api_key_env: default_key_env(),
            cache_dir: cache_dir.into(),
            offline: true,
            timeout_secs: default_timeout(),
            retries: default_retries(),
            max_in_flight: default_in_flight(),
            image_mode: ImageMode::None,
        }
    }
}

/// OpenAI-compatible chat completions over HTTP.
pub struct HttpChatTransport {
    url: String,
    api_key: Option<String>,
    image_mode: ImageMode,
    http: reqwest::blocking::Client,
}

impl HttpChatTransport {
    pub fn new(url: impl Into<String>, api_key: Option<String>, image_mode: ImageMode, timeout: Duration) -> Result<Self, String> {
        let http = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| e.to_string())?;
        Ok(HttpChatTransport { url: url.into(), api_key, image_mode, http })
    }

    /// Request body sent for `request`.
    pub fn body(&self, request: &GenerationRequest) -> Result<serde_json::Value, String> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        let user = match (&request.image_uri, self.image_mode) {
            (None, _) => serde_json::json!(request.prompt),
            (Some(_), ImageMode::None) => return Err("endpoint does not accept images".into()),
            (Some(uri), mode) => {
                let url = if mode == ImageMode::Base64 { data_url(uri)? } else { uri.clone() };
                serde_json::json!([
                    {"type": "text", "text": request.prompt},
                    {"type": "image_url", "image_url": {"url": url}},
                ])
            }
        };
        messages.push(serde_json::json!({"role": "user", "content": user}));
        Ok(serde_json::json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }))
    }
}

fn data_url(path: &str) -> Result<String, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{path}: {e}"))?;
    let mime = match Path::new(path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

impl ChatTransport for HttpChatTransport {
    fn complete(&self, request: &GenerationRequest) -> Result<String, String> {
        let mut req = self.http.post(&self.url).json(&self.body(request)?);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let v: serde_json::Value = resp.json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| v["choices"][0]["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0] text".to_string())
    }

    fn supports_images(&self) -> bool {
        self.image_mode != ImageMode::None
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub network_calls: u64,
}

pub struct GenClient {
    cache: GenerationCache,
    transport: Option<Box<dyn ChatTransport>>,
    offline: bool,
    vision: bool,
    retries: u32,
    limit: InFlightLimit,
    hits: AtomicU64,
    misses: AtomicU64,
    network_calls: AtomicU64,
}

impl GenClient {
    pub fn new(cache: GenerationCache, transport: Option<Box<dyn ChatTransport>>) -> Self {
        let vision = transport.as_ref().is_some_and(|t| t.supports_images());
        GenClient {
            cache,
            offline: transport.is_none(),
            transport,
            vision,
            retries: default_retries(),
            limit: InFlightLimit::new(default_in_flight()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            network_calls: AtomicU64::new(0),
        }
    }

    /// Builds a client from config, reading the endpoint URL and API key
    /// from the configured environment variables unless offline.
    pub fn from_config(config: &GenerationConfig) -> Result<Self, GenError> {
        let cache = GenerationCache::open(&config.cache_dir)?;
        let url = config.endpoint.clone().or_else(|| std::env::var(&config.endpoint_env).ok());
        let transport: Option<Box<dyn ChatTransport>> = match (config.offline, url) {
            (false, Some(url)) => {
                let key = std::env::var(&config.api_key_env).ok();
                let t = HttpChatTransport::new(url, key, config.image_mode, Duration::from_secs(config.timeout_secs))
                    .map_err(GenError::InvalidRequest)?;
                Some(Box::new(t))
            }
            _ => None,
        };
        let mut client = GenClient::new(cache, transport);
        client.offline = config.offline;
        // Cached replays of image requests are allowed when the endpoint is
        // declared vision-capable even if it is not reachable right now.
        client.vision = config.image_mode != ImageMode::None;
        client.retries = config.retries;
        client.limit = InFlightLimit::new(config.max_in_flight);
        Ok(client)
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limit = InFlightLimit::new(n);
        self
    }

    pub fn with_vision(mut self, vision: bool) -> Self {
        self.vision = vision;
        self
    }

    pub fn supports_images(&self) -> bool {
        self.vision
    }

    pub fn cache(&self) -> &GenerationCache {
        &self.cache
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            network_calls: self.network_calls.load(Ordering::SeqCst),
        }
    }

    pub fn generate(&self, request: &GenerationRequest) -> Result<String, GenError> {
        request.validate()?;
        if request.image_uri.is_some() && !self.vision {
            return Err(GenError::NoVisionCapability);
        }
        let key = request.cache_key();
        if let Some(text) = self.cache.get(&key)? {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(text);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let transport = match &self.transport {
            Some(t) => t,
            None if self.offline => return Err(GenError::CacheMiss { key }),
            None => return Err(GenError::NoEndpoint { key }),
        };

        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            let result = {
                let _permit = self.limit.acquire();
                self.network_calls.fetch_add(1, Ordering::SeqCst);
                transport.complete(request)
            };
            match result {
                Ok(text) => return self.cache.put(request, &text),
                Err(e) => {
                    tracing::warn!(%key, attempt, error = %e, "generation request failed");
                    last = e;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(250 << attempt.min(5)));
                    }
                }
            }
        }
        Err(GenError::Transport { key, attempts, message: last })
    }
}

fn strip_enumeration(mut s: &str) -> &str {
    loop {
        let t = s.trim_start();
        let rest = if let Some(r) = t.strip_prefix(['-', '*', '•']) {
            Some(r)
        } else {
            let digits = t.bytes().take_while(u8::is_ascii_digit).count();
            if digits > 0 {
                t[digits..].strip_prefix(['.', ')'])
            } else {
                None
            }
        };
        match rest {
            // A marker only counts when followed by whitespace or nothing,
            // so "3.5 million" and "-5 degrees" survive.
            Some(r) if r.is_empty() || r.starts_with(char::is_whitespace) => s = r,
            _ => return t,
        }
    }
}

/// True when `s` starts with a list marker such as `1.`, `2)`, `-` or `•`.
pub fn has_enumeration_prefix(s: &str) -> bool {
    strip_enumeration(s).len() != s.trim_start().len()
}

/// Splits raw generator output into sentences: one per line, list markers
/// stripped, whitespace trimmed, blanks dropped, at most `expected_n` kept.
pub fn parse_sentence_list(raw: &str, expected_n: usize) -> Result<Vec<String>, GenError> {
    let out: Vec<String> = raw
        .lines()
        .map(|l| strip_enumeration(l).trim())
        .filter(|l| !l.is_empty())
        .take(expected_n)
        .map(str::to_string)
        .collect();
    if out.is_empty() {
        return Err(GenError::EmptyGeneration);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::sync::atomic::AtomicUsize;
    use std::sync::Arc;

    type Responder = Box<dyn Fn(&GenerationRequest) -> Result<String, String> + Send + Sync>;

    /// Transport returning canned text, counting calls.
    pub struct StubTransport {
        pub calls: Arc<AtomicUsize>,
        pub respond: Responder,
        pub vision: bool,
    }

    impl StubTransport {
        pub fn fixed(text: &str) -> (Self, Arc<AtomicUsize>) {
            let text = text.to_string();
            Self::with(move |_| Ok(text.clone()))
        }

        pub fn with(f: impl Fn(&GenerationRequest) -> Result<String, String> + Send + Sync + 'static) -> (Self, Arc<AtomicUsize>) {
            let calls = Arc::new(AtomicUsize::new(0));
            (StubTransport { calls: calls.clone(), respond: Box::new(f), vision: true }, calls)
        }
    }

    impl ChatTransport for StubTransport {
        fn complete(&self, request: &GenerationRequest) -> Result<String, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.respond)(request)
        }

        fn supports_images(&self) -> bool {
            self.vision
        }
    }
}
