//! Model backends: the MLLM that writes descriptions, the text and image
//! encoders, and the noun-phrase extractor.
//!
//! Every backend exists in three flavours (`http`, `file`, `stub`) and is
//! always reached through [`cache::DiskCache`], so repeated requests never
//! hit the model twice.

pub mod cache;
pub mod file;
pub mod http;
pub mod nouns;
pub mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::masks::InstanceImage;
use cache::DiskCache;

pub use nouns::extract_noun_phrases;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable ({backend}): {reason}")]
    Unavailable { backend: String, reason: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("text to encode is empty")]
    EmptyText,
    #[error("instance image is {actual:?}, encoder expects {expected}x{expected}")]
    BadResolution { expected: u32, actual: (u32, u32) },
    #[error("no precomputed entry for request {digest}")]
    MissingEntry { digest: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("backend config: {0}")]
    Config(String),
}

/// A feature vector from one of the encoders. Always non-empty, finite and
/// non-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::BadResponse("embedding has no values".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(BackendError::BadResponse(format!(
                "embedding entry {i} is not finite"
            )));
        }
        if values.iter().all(|&v| v == 0.0) {
            return Err(BackendError::BadResponse("embedding is all zeros".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, k: f64) -> Result<Self, BackendError> {
        Self::new(self.values.iter().map(|v| v * k).collect())
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = BackendError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}

/// The source image handed to the MLLM, with a content digest for caching.
#[derive(Debug, Clone)]
pub struct ImageRef {
    pub image_id: String,
    pub pixels: Arc<RgbImage>,
    digest: String,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, pixels: Arc<RgbImage>) -> Self {
        let digest = pixel_digest(&pixels, "");
        Self {
            image_id: image_id.into(),
            pixels,
            digest,
        }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

fn pixel_digest(img: &RgbImage, tag: &str) -> String {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update(img.width().to_le_bytes());
    h.update(img.height().to_le_bytes());
    h.update(img.as_raw());
    hex::encode(h.finalize())
}

/// Content digest of a rendered instance image, strategy tag included.
pub fn instance_digest(img: &InstanceImage) -> String {
    pixel_digest(&img.pixels, img.strategy.tag())
}

pub trait Mllm: Send + Sync {
    fn generate(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError>;
}

pub trait TextEncoder: Send + Sync {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError>;
}

pub trait ImageEncoder: Send + Sync {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError>;
}

pub trait NounPhraseExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError>;
}

pub(crate) fn check_resolution(img: &InstanceImage, expected: u32) -> Result<(), BackendError> {
    if img.width() != expected || img.height() != expected {
        return Err(BackendError::BadResolution {
            expected,
            actual: (img.width(), img.height()),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mllm,
    TextEncoder,
    ImageEncoder,
    NpExtractor,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::Mllm,
        BackendKind::TextEncoder,
        BackendKind::ImageEncoder,
        BackendKind::NpExtractor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Mllm => "mllm",
            BackendKind::TextEncoder => "text_encoder",
            BackendKind::ImageEncoder => "image_encoder",
            BackendKind::NpExtractor => "np_extractor",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendImpl {
    Http,
    File,
    /// Seeded-hash stub; with a fixture path it becomes the planted stub.
    Stub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendOptions {
    /// Embedding width of the stub encoders.
    pub dim: usize,
    pub seed: u64,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub retry_attempts: u32,
    pub initial_backoff_ms: u64,
    /// Sampling temperature sent to HTTP MLLMs.
    pub temperature: f64,
}

impl Default for BackendOptions {
    fn default() -> Self {
        Self {
            dim: 512,
            seed: 0,
            timeout_secs: 120,
            max_in_flight: 4,
            retry_attempts: 3,
            initial_backoff_ms: 1000,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendId {
    pub kind: BackendKind,
    #[serde(rename = "impl")]
    pub implementation: BackendImpl,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_or_path: Option<String>,
    #[serde(default)]
    pub model_tag: String,
    #[serde(default)]
    pub options: BackendOptions,
}

impl BackendId {
    pub fn stub(kind: BackendKind) -> Self {
        Self {
            kind,
            implementation: BackendImpl::Stub,
            endpoint_or_path: None,
            model_tag: "stub".into(),
            options: BackendOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let missing = self
            .endpoint_or_path
            .as_deref()
            .is_none_or(|s| s.trim().is_empty());
        match self.implementation {
            BackendImpl::Http if missing => Err(BackendError::Config(format!(
                "{} http backend needs an endpoint",
                self.kind
            ))),
            BackendImpl::File if missing => Err(BackendError::Config(format!(
                "{} file backend needs a path",
                self.kind
            ))),
            _ if self.options.max_in_flight == 0 => Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Tag under which responses are cached. Stub outputs depend on their
    /// options and fixture contents, so those are folded in.
    pub fn cache_identity(&self) -> Result<String, BackendError> {
        if self.implementation != BackendImpl::Stub {
            return Ok(self.model_tag.clone());
        }
        let mut tag = format!(
            "{}#stub:dim={}:seed={}",
            self.model_tag, self.options.dim, self.options.seed
        );
        if let Some(p) = &self.endpoint_or_path {
            let bytes = std::fs::read(p).map_err(|e| {
                BackendError::Config(format!("cannot read fixture {p}: {e}"))
            })?;
            tag.push_str(":fixture=");
            tag.push_str(&hex::encode(Sha256::digest(&bytes)));
        }
        Ok(tag)
    }

    fn locator(&self) -> &str {
        self.endpoint_or_path.as_deref().unwrap_or_default()
    }

    fn path(&self) -> PathBuf {
        PathBuf::from(self.locator())
    }
}

/// Number of real backend invocations (cache misses) per kind.
#[derive(Debug, Default)]
pub struct CallCounter {
    counts: [AtomicU64; 4],
}

impl CallCounter {
    fn slot(kind: BackendKind) -> usize {
        BackendKind::ALL.iter().position(|&k| k == kind).unwrap()
    }

    pub fn record(&self, kind: BackendKind) {
        self.counts[Self::slot(kind)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self, kind: BackendKind) -> u64 {
        self.counts[Self::slot(kind)].load(Ordering::Relaxed)
    }

    pub fn total(&self) -> u64 {
        BackendKind::ALL.iter().map(|&k| self.get(k)).sum()
    }
}

/// Routes one backend through the disk cache and counts the misses.
struct Cached<T: ?Sized> {
    kind: BackendKind,
    model_tag: String,
    cache: Arc<DiskCache>,
    calls: Arc<CallCounter>,
    inner: Box<T>,
}

impl<T: ?Sized> Cached<T> {
    fn get<R, P>(&self, payload: &P, compute: impl FnOnce(&T) -> Result<R, BackendError>) -> Result<R, BackendError>
    where
        R: Serialize + serde::de::DeserializeOwned,
        P: Serialize,
    {
        self.cache
            .get_or_compute(self.kind, &self.model_tag, payload, || {
                self.calls.record(self.kind);
                compute(&self.inner)
            })
            .map(|(value, _hit)| value)
    }
}

#[derive(Serialize)]
pub(crate) struct MllmRequest<'a> {
    pub image: &'a str,
    pub prompt: &'a str,
}

#[derive(Serialize)]
pub(crate) struct TextRequest<'a> {
    pub text: &'a str,
}

#[derive(Serialize)]
pub(crate) struct ImageRequest<'a> {
    pub image: &'a str,
}

const LONG_TEXT_CHARS: usize = 300;

impl Mllm for Cached<dyn Mllm> {
    fn generate(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        let req = MllmRequest {
            image: image.digest(),
            prompt,
        };
        self.get(&req, |m| m.generate(image, prompt))
    }
}

impl TextEncoder for Cached<dyn TextEncoder> {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        if text.chars().count() > LONG_TEXT_CHARS {
            log::warn!(
                "text of {} chars sent to encoder; truncation is up to the model",
                text.chars().count()
            );
        }
        self.get(&TextRequest { text }, |e| e.encode_text(text))
    }
}

impl ImageEncoder for Cached<dyn ImageEncoder> {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError> {
        let digest = instance_digest(img);
        self.get(&ImageRequest { image: &digest }, |e| e.encode_image(img))
    }
}

impl NounPhraseExtractor for Cached<dyn NounPhraseExtractor> {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        self.get(&TextRequest { text }, |e| e.extract(text))
    }
}

/// The four backends a pipeline run needs, each behind the cache.
#[derive(Clone)]
pub struct Backends {
    pub mllm: Arc<dyn Mllm>,
    pub text: Arc<dyn TextEncoder>,
    pub image: Arc<dyn ImageEncoder>,
    pub nouns: Arc<dyn NounPhraseExtractor>,
    calls: Arc<CallCounter>,
}

impl Backends {
    /// Builds the bundle from per-kind ids. Missing kinds default to stubs.
    /// `resolution` is the side length the image encoder accepts.
    pub fn from_ids(
        ids: &BTreeMap<BackendKind, BackendId>,
        cache: Arc<DiskCache>,
        resolution: u32,
    ) -> Result<Self, BackendError> {
        let calls = Arc::new(CallCounter::default());
        let id_for = |kind: BackendKind| -> Result<BackendId, BackendError> {
            let id = ids.get(&kind).cloned().unwrap_or_else(|| BackendId::stub(kind));
            if id.kind != kind {
                return Err(BackendError::Config(format!(
                    "backend registered under {kind} declares kind {}",
                    id.kind
                )));
            }
            id.validate()?;
            Ok(id)
        };
        let wrap = |id: &BackendId| -> Result<_, BackendError> {
            Ok((id.kind, id.cache_identity()?, cache.clone(), calls.clone()))
        };

        let id = id_for(BackendKind::Mllm)?;
        let inner: Box<dyn Mllm> = match id.implementation {
            BackendImpl::Http => Box::new(http::HttpMllm::new(&id)?),
            BackendImpl::File => Box::new(file::FileMllm::open(&id.path(), &id.model_tag)?),
            BackendImpl::Stub => match &id.endpoint_or_path {
                Some(p) => Box::new(stub::PlantedMllm::open(p.as_ref(), id.options.seed)?),
                None => Box::new(stub::StubMllm::new(id.options.seed)),
            },
        };
        let (kind, model_tag, cache_, calls_) = wrap(&id)?;
        let mllm: Arc<dyn Mllm> = Arc::new(Cached { kind, model_tag, cache: cache_, calls: calls_, inner });

        let id = id_for(BackendKind::TextEncoder)?;
        let inner: Box<dyn TextEncoder> = match id.implementation {
            BackendImpl::Http => Box::new(http::HttpTextEncoder::new(&id)?),
            BackendImpl::File => Box::new(file::FileTextEncoder::open(&id.path(), &id.model_tag)?),
            BackendImpl::Stub => match &id.endpoint_or_path {
                Some(p) => Box::new(stub::PlantedTextEncoder::open(
                    p.as_ref(),
                    id.options.dim,
                    id.options.seed,
                )?),
                None => Box::new(stub::HashTextEncoder::new(id.options.dim, id.options.seed)),
            },
        };
        let (kind, model_tag, cache_, calls_) = wrap(&id)?;
        let text: Arc<dyn TextEncoder> = Arc::new(Cached { kind, model_tag, cache: cache_, calls: calls_, inner });

        let id = id_for(BackendKind::ImageEncoder)?;
        let inner: Box<dyn ImageEncoder> = match id.implementation {
            BackendImpl::Http => Box::new(http::HttpImageEncoder::new(&id, resolution)?),
            BackendImpl::File => Box::new(file::FileImageEncoder::open(
                &id.path(),
                &id.model_tag,
                resolution,
            )?),
            BackendImpl::Stub => match &id.endpoint_or_path {
                Some(p) => Box::new(stub::PlantedImageEncoder::open(
                    p.as_ref(),
                    id.options.dim,
                    id.options.seed,
                    resolution,
                )?),
                None => Box::new(stub::HashImageEncoder::new(
                    id.options.dim,
                    id.options.seed,
                    resolution,
                )),
            },
        };
        let (kind, model_tag, cache_, calls_) = wrap(&id)?;
        let image: Arc<dyn ImageEncoder> = Arc::new(Cached { kind, model_tag, cache: cache_, calls: calls_, inner });

        let id = id_for(BackendKind::NpExtractor)?;
        let inner: Box<dyn NounPhraseExtractor> = match id.implementation {
            BackendImpl::Http => Box::new(http::HttpNounPhrases::new(&id)?),
            BackendImpl::File => Box::new(file::FileNounPhrases::open(&id.path(), &id.model_tag)?),
            BackendImpl::Stub => Box::new(nouns::BaselineNounPhrases),
        };
        let (kind, model_tag, cache_, calls_) = wrap(&id)?;
        let nouns: Arc<dyn NounPhraseExtractor> = Arc::new(Cached { kind, model_tag, cache: cache_, calls: calls_, inner });

        Ok(Self {
            mllm,
            text,
            image,
            nouns,
            calls,
        })
    }

    /// Real backend invocations so far (cache hits excluded).
    pub fn calls(&self) -> &CallCounter {
        &self.calls
    }
}
