//! Embedding providers: synthetic (keyed hash), file-backed, remote HTTP.

use super::{EmbeddingError, EmbeddingStore, EmbeddingVector};
use crate::limit::InFlightLimit;
use crate::types::ImageRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Known output dimension, if fixed up front.
    fn dimension(&self) -> Option<usize>;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError>;
}

/// Deterministic model-free encoder.
///
/// Component `j` comes from SHA-256 over `(seed, domain, input, j / 8)`,
/// eight little-endian `u32` words per digest mapped onto `[-1, 1)`; the
/// result is then normalized. Stable across processes and platforms.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    name: String,
    seed: u64,
    dim: usize,
}

impl SyntheticEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        SyntheticEncoder { name: format!("synthetic-{seed}-{dim}"), seed, dim }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn encode(&self, domain: &[u8], input: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut values = Vec::with_capacity(self.dim);
        let mut block = 0u64;
        while values.len() < self.dim {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(domain);
            h.update((input.len() as u64).to_le_bytes());
            h.update(input.as_bytes());
            h.update(block.to_le_bytes());
            let digest = h.finalize();
            for word in digest.chunks_exact(4) {
                if values.len() == self.dim {
                    break;
                }
                let u = u32::from_le_bytes(word.try_into().expect("4 bytes"));
                values.push((f64::from(u) / 2_147_483_648.0 - 1.0) as f32);
            }
            block += 1;
        }
        EmbeddingVector::new(values)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.encode(b"text", text)
    }

    /// Images are encoded from their id, in a separate domain from texts.
    pub fn embed_image_id(&self, id: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.encode(b"image", id)
    }
}

impl EmbeddingProvider for SyntheticEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        images.iter().map(|i| self.embed_image_id(i.store_key())).collect()
    }
}

/// Serves vectors from a prebuilt store. Texts are looked up by their exact
/// string, images by [`ImageRecord::store_key`].
#[derive(Debug, Clone)]
pub struct FileProvider {
    name: String,
    store: Arc<EmbeddingStore>,
}

impl FileProvider {
    pub fn new(name: impl Into<String>, store: Arc<EmbeddingStore>) -> Self {
        FileProvider { name: name.into(), store }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl EmbeddingProvider for FileProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.store.dim())
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.store.lookup(t).cloned()).collect()
    }

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        images.iter().map(|i| self.store.lookup(i.store_key()).cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEncoderConfig {
    pub url: String,
    #[serde(default)]
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub dimension: Option<usize>,
}

fn default_timeout_secs() -> u64 {
    60
}
fn default_retries() -> u32 {
    3
}
fn default_batch_size() -> usize {
    64
}
fn default_in_flight() -> usize {
    4
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    model: &'a str,
    input_type: &'a str,
    inputs: &'a [String],
}

#[derive(Deserialize)]
struct EncodeResponse {
    embeddings: Vec<Vec<f32>>,
}

/// HTTP encoder: `POST {model, input_type: "text"|"image", inputs: [..]}`
/// answered with `{embeddings: [[f32]]}`. Images are sent by URI.
pub struct RemoteEncoder {
    name: String,
    config: RemoteEncoderConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl RemoteEncoder {
    pub fn new(name: impl Into<String>, config: RemoteEncoderConfig) -> Result<Self, EmbeddingError> {
        let token = match &config.token_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| EmbeddingError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EmbeddingError::Config(e.to_string()))?;
        let limit = InFlightLimit::new(config.max_in_flight.max(1));
        Ok(RemoteEncoder { name: name.into(), config, token, http, limit })
    }

    fn post_once(&self, input_type: &str, inputs: &[String]) -> Result<Vec<Vec<f32>>, String> {
        let _permit = self.limit.acquire();
        let mut req = self.http.post(&self.config.url).json(&EncodeRequest {
            model: &self.config.model,
            input_type,
            inputs,
        });
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let body: EncodeResponse = resp.json().map_err(|e| e.to_string())?;
        if body.embeddings.len() != inputs.len() {
            return Err(format!("{} embeddings for {} inputs", body.embeddings.len(), inputs.len()));
        }
        Ok(body.embeddings)
    }

    fn encode(&self, input_type: &str, inputs: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(self.config.batch_size.max(1)) {
            let attempts = self.config.retries + 1;
            let mut last = String::new();
            let mut got = None;
            for attempt in 0..attempts {
                match self.post_once(input_type, chunk) {
                    Ok(v) => {
                        got = Some(v);
                        break;
                    }
                    Err(e) => {
                        tracing::warn!(attempt, error = %e, "encoder request failed");
                        last = e;
                        if attempt + 1 < attempts {
                            std::thread::sleep(Duration::from_millis(200 << attempt.min(5)));
                        }
                    }
                }
            }
            let raw = got.ok_or(EmbeddingError::Transport { attempts, message: last })?;
            for values in raw {
                let v = EmbeddingVector::new(values)?;
                if let Some(d) = self.config.dimension {
                    if v.dim() != d {
                        return Err(EmbeddingError::DimensionMismatch { expected: d, got: v.dim() });
                    }
                }
                out.push(v);
            }
        }
        Ok(out)
    }
}

impl EmbeddingProvider for RemoteEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> Option<usize> {
        self.config.dimension
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        self.encode("text", texts)
    }

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let uris: Vec<String> = images.iter().map(|i| i.uri.clone()).collect();
        self.encode("image", &uris)
    }
}

/// Memoizes text embeddings of an inner provider.
pub struct CachingProvider<P> {
    inner: P,
    texts: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<P: EmbeddingProvider> CachingProvider<P> {
    pub fn new(inner: P) -> Self {
        CachingProvider { inner, texts: Mutex::new(HashMap::new()) }
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachingProvider<P> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn dimension(&self) -> Option<usize> {
        self.inner.dimension()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let missing: Vec<String> = {
            let cache = self.texts.lock().expect("cache lock");
            let mut m: Vec<String> = texts.iter().filter(|t| !cache.contains_key(*t)).cloned().collect();
            m.sort();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed_texts(&missing)?;
            let mut cache = self.texts.lock().expect("cache lock");
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.entry(t).or_insert(v);
            }
        }
        let cache = self.texts.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        self.inner.embed_images(images)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_texts(texts)
    }

    fn embed_images(&self, images: &[ImageRecord]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_images(images)
    }
}
