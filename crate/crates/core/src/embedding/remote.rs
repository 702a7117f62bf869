//! Client for the encoder sidecar.
//!
//! ```text
//! GET  /v1/descriptor    -> {"model_name", "embedding_dim", "layer", "input_side"}
//! POST /v1/encode/text   {"texts": [...], "mode": "global"|"tokens"}
//! POST /v1/encode/image  {"images_b64": [...], "mode": "global"|"patches"}
//!                        -> {"embeddings": [[...], ...], "rows_per_item": [...]}
//! ```
//!
//! Errors come back as HTTP 400 `{"error": ...}` for malformed input and
//! 503 while the model is not loaded.

use std::sync::{Condvar, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{
    crop_key, patches_key, text_key, tokens_key, EmbedError, EmbeddingKind, EmbeddingMatrix, EmbeddingRecord,
    EmbeddingSource, EmbeddingStore, EncoderDescriptor, ImageRef,
};
use crate::crops::{extract_and_resize, preprocess_input, CropRect, ImageRaster};

/// Where the sidecar lives and how hard to push it.
#[derive(Debug, Clone)]
pub struct EncoderEndpoint {
    pub base_url: String,
    pub max_in_flight: usize,
    pub max_batch: usize,
    pub retries: u32,
    pub timeout: Duration,
}

impl EncoderEndpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            max_in_flight: 4,
            max_batch: 64,
            retries: 3,
            timeout: Duration::from_secs(120),
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    texts: &'a [String],
    mode: &'a str,
}

#[derive(Serialize)]
struct ImageRequest<'a> {
    images_b64: &'a [String],
    mode: &'a str,
}

#[derive(Deserialize)]
struct EncodeResponse {
    embeddings: Vec<Vec<f32>>,
    rows_per_item: Vec<usize>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

/// Blocking HTTP client; safe to share across threads. Concurrent requests
/// are capped at `max_in_flight`.
pub struct EncoderClient {
    endpoint: EncoderEndpoint,
    agent: ureq::Agent,
    descriptor: EncoderDescriptor,
    gate: Semaphore,
}

impl std::fmt::Debug for EncoderClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderClient")
            .field("endpoint", &self.endpoint)
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

fn transport(e: ureq::Error) -> EmbedError {
    match e {
        ureq::Error::Io(_)
        | ureq::Error::Timeout(_)
        | ureq::Error::HostNotFound
        | ureq::Error::ConnectionFailed => EmbedError::Transport(e.to_string()),
        other => EmbedError::Protocol(other.to_string()),
    }
}

impl EncoderClient {
    /// Fetches the descriptor; fails if the sidecar is unreachable.
    pub fn connect(endpoint: EncoderEndpoint) -> Result<Self, EmbedError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(endpoint.timeout))
            .build()
            .into();
        let mut client = Self {
            gate: Semaphore::new(endpoint.max_in_flight),
            endpoint,
            agent,
            descriptor: EncoderDescriptor {
                model_name: String::new(),
                embedding_dim: 1,
                layer: super::EncoderLayer::Last,
                input_side: 1,
            },
        };
        let body = client.with_retries(|| client.get("/v1/descriptor"))?;
        let descriptor: EncoderDescriptor =
            serde_json::from_str(&body).map_err(|e| EmbedError::Protocol(format!("descriptor: {e}")))?;
        descriptor.validate()?;
        client.descriptor = descriptor;
        Ok(client)
    }

    pub fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    pub fn endpoint(&self) -> &EncoderEndpoint {
        &self.endpoint
    }

    fn read(&self, mut resp: ureq::http::Response<ureq::Body>) -> Result<String, EmbedError> {
        let status = resp.status().as_u16();
        let text = resp.body_mut().with_config().limit(u64::MAX).read_to_string().map_err(transport)?;
        if status == 200 {
            return Ok(text);
        }
        let message = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or(text);
        Err(EmbedError::Server { status, message })
    }

    fn get(&self, path: &str) -> Result<String, EmbedError> {
        let _permit = self.gate.acquire();
        let resp = self.agent.get(format!("{}{path}", self.endpoint.base_url)).call().map_err(transport)?;
        self.read(resp)
    }

    fn post(&self, path: &str, body: &impl Serialize) -> Result<String, EmbedError> {
        let _permit = self.gate.acquire();
        let resp = self
            .agent
            .post(format!("{}{path}", self.endpoint.base_url))
            .send_json(body)
            .map_err(transport)?;
        self.read(resp)
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T, EmbedError>) -> Result<T, EmbedError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && attempt < self.endpoint.retries => {
                    log::warn!("encoder request failed ({e}), retry {}", attempt + 1);
                    thread::sleep(Duration::from_millis(100 << attempt.min(6)));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn split(&self, body: &str, items: usize, single_row: bool) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        let resp: EncodeResponse =
            serde_json::from_str(body).map_err(|e| EmbedError::Protocol(format!("encode response: {e}")))?;
        if resp.rows_per_item.len() != items {
            return Err(EmbedError::Protocol(format!(
                "asked for {items} items, got rows_per_item for {}",
                resp.rows_per_item.len()
            )));
        }
        let total: usize = resp.rows_per_item.iter().sum();
        if total != resp.embeddings.len() {
            return Err(EmbedError::Protocol(format!(
                "rows_per_item sums to {total} but {} rows were returned",
                resp.embeddings.len()
            )));
        }
        let dim = self.descriptor.embedding_dim;
        if let Some(bad) = resp.embeddings.iter().find(|r| r.len() != dim) {
            return Err(EmbedError::DimMismatch { expected: dim, actual: bad.len() });
        }
        let mut rows = resp.embeddings.into_iter();
        let mut out = Vec::with_capacity(items);
        for &n in &resp.rows_per_item {
            if single_row && n != 1 {
                return Err(EmbedError::Protocol(format!("global mode returned {n} rows for one item")));
            }
            let data: Vec<f32> = rows.by_ref().take(n).flatten().collect();
            out.push(EmbeddingMatrix::new(n, dim, data).map_err(|e| EmbedError::Protocol(e.to_string()))?);
        }
        Ok(out)
    }

    /// `tokens = false` gives one global row per text.
    pub fn encode_texts(&self, texts: &[String], tokens: bool) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        if texts.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.endpoint.max_batch.max(1)) {
            let req = TextRequest { texts: chunk, mode: if tokens { "tokens" } else { "global" } };
            let body = self.with_retries(|| self.post("/v1/encode/text", &req))?;
            out.extend(self.split(&body, chunk.len(), !tokens)?);
        }
        Ok(out)
    }

    /// Images are sent PNG-encoded; `patches = false` gives one global row per image.
    pub fn encode_images(&self, images: &[ImageRaster], patches: bool) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        if images.is_empty() {
            return Err(EmbedError::EmptyBatch);
        }
        let engine = base64::engine::general_purpose::STANDARD;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(self.endpoint.max_batch.max(1)) {
            let encoded = chunk
                .iter()
                .map(|img| Ok(engine.encode(img.encode_png()?)))
                .collect::<Result<Vec<_>, EmbedError>>()?;
            let req = ImageRequest { images_b64: &encoded, mode: if patches { "patches" } else { "global" } };
            let body = self.with_retries(|| self.post("/v1/encode/image", &req))?;
            out.extend(self.split(&body, chunk.len(), !patches)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct KeyedImage {
    pub key: String,
    pub raster: ImageRaster,
}

#[derive(Debug, Clone)]
pub enum EncodeBatch {
    Texts(Vec<String>),
    Images(Vec<KeyedImage>),
}

/// Encodes a batch and wraps each result in a keyed record, preserving
/// request order. Text keys are content hashes; image keys are supplied.
pub fn encode_remote(
    client: &EncoderClient,
    batch: &EncodeBatch,
    kind: EmbeddingKind,
) -> Result<Vec<EmbeddingRecord>, EmbedError> {
    let (keys, mats) = match (batch, kind) {
        (EncodeBatch::Texts(texts), EmbeddingKind::GlobalText | EmbeddingKind::TokenSequence) => {
            let tokens = kind == EmbeddingKind::TokenSequence;
            let keys: Vec<String> =
                texts.iter().map(|t| if tokens { tokens_key(t) } else { text_key(t) }).collect();
            (keys, client.encode_texts(texts, tokens)?)
        }
        (EncodeBatch::Images(images), EmbeddingKind::GlobalImage | EmbeddingKind::PatchSequence) => {
            let rasters: Vec<ImageRaster> = images.iter().map(|i| i.raster.clone()).collect();
            let keys = images.iter().map(|i| i.key.clone()).collect();
            (keys, client.encode_images(&rasters, kind == EmbeddingKind::PatchSequence)?)
        }
        (_, kind) => return Err(EmbedError::Protocol(format!("{kind:?} does not match the batch modality"))),
    };
    keys.into_iter().zip(mats).map(|(k, m)| EmbeddingRecord::new(k, kind, m)).collect()
}

/// [`EmbeddingSource`] backed by the sidecar, memoising every result in an
/// in-memory store that can be persisted and reloaded.
pub struct RemoteSource {
    client: EncoderClient,
    cache: RwLock<EmbeddingStore>,
}

impl RemoteSource {
    pub fn new(client: EncoderClient) -> Self {
        Self::with_cache(client, EmbeddingStore::new())
    }

    pub fn with_cache(client: EncoderClient, cache: EmbeddingStore) -> Self {
        Self { client, cache: RwLock::new(cache) }
    }

    pub fn client(&self) -> &EncoderClient {
        &self.client
    }

    pub fn cache_snapshot(&self) -> EmbeddingStore {
        self.cache.read().expect("cache poisoned").clone()
    }

    fn missing(&self, keys: &[String]) -> Vec<usize> {
        let cache = self.cache.read().expect("cache poisoned");
        keys.iter().enumerate().filter(|(_, k)| !cache.contains(k)).map(|(i, _)| i).collect()
    }

    fn fill(&self, records: Vec<EmbeddingRecord>) {
        let mut cache = self.cache.write().expect("cache poisoned");
        for r in records {
            cache.insert_if_absent(r);
        }
    }

    fn collect(&self, keys: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        let cache = self.cache.read().expect("cache poisoned");
        let mats = keys
            .iter()
            .map(|k| cache.get(k).map(|r| &r.matrix).ok_or_else(|| EmbedError::CacheMiss(vec![k.clone()])))
            .collect::<Result<Vec<_>, _>>()?;
        EmbeddingMatrix::stack(mats, self.client.descriptor().embedding_dim)
    }

    fn texts_as(&self, texts: &[String], kind: EmbeddingKind) -> Result<EmbeddingMatrix, EmbedError> {
        let tokens = kind == EmbeddingKind::TokenSequence;
        let keys: Vec<String> = texts.iter().map(|t| if tokens { tokens_key(t) } else { text_key(t) }).collect();
        let todo = self.missing(&keys);
        if !todo.is_empty() {
            let batch = EncodeBatch::Texts(todo.iter().map(|&i| texts[i].clone()).collect());
            self.fill(encode_remote(&self.client, &batch, kind)?);
        }
        self.collect(&keys)
    }
}

impl EmbeddingSource for RemoteSource {
    fn descriptor(&self) -> &EncoderDescriptor {
        self.client.descriptor()
    }

    fn image_crops(&self, image: &ImageRef, rects: &[CropRect]) -> Result<EmbeddingMatrix, EmbedError> {
        let keys: Vec<String> = rects.iter().map(|&r| crop_key(&image.id, r)).collect();
        let todo = self.missing(&keys);
        if !todo.is_empty() {
            let side = self.descriptor().input_side;
            let base = preprocess_input(&image.load()?, side)?;
            let images = todo
                .iter()
                .map(|&i| {
                    Ok(KeyedImage { key: keys[i].clone(), raster: extract_and_resize(&base, rects[i], (side, side))? })
                })
                .collect::<Result<Vec<_>, EmbedError>>()?;
            self.fill(encode_remote(&self.client, &EncodeBatch::Images(images), EmbeddingKind::GlobalImage)?);
        }
        self.collect(&keys)
    }

    fn texts(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbedError> {
        self.texts_as(texts, EmbeddingKind::GlobalText)
    }

    fn image_patches(&self, image: &ImageRef) -> Result<EmbeddingMatrix, EmbedError> {
        let keys = [patches_key(&image.id)];
        if !self.missing(&keys).is_empty() {
            let raster = preprocess_input(&image.load()?, self.descriptor().input_side)?;
            let batch = EncodeBatch::Images(vec![KeyedImage { key: keys[0].clone(), raster }]);
            self.fill(encode_remote(&self.client, &batch, EmbeddingKind::PatchSequence)?);
        }
        self.collect(&keys)
    }

    fn text_tokens(&self, text: &str) -> Result<EmbeddingMatrix, EmbedError> {
        self.texts_as(&[text.to_string()], EmbeddingKind::TokenSequence)
    }
}
