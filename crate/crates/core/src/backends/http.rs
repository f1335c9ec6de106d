//! HTTP clients for OpenAI-style chat and embedding endpoints.

use std::io::Cursor;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use image::{ImageFormat, RgbImage};
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    check_resolution, BackendError, BackendId, Embedding, ImageEncoder, ImageRef, Mllm,
    NounPhraseExtractor, TextEncoder,
};
use crate::masks::InstanceImage;

/// Counting semaphore bounding in-flight requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `n` (1-based): doubles each time.
    pub fn backoff(&self, n: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(n.saturating_sub(1))
    }
}

enum Failure {
    Transient(BackendError),
    Fatal(BackendError),
}

/// Shared POST-with-retry machinery.
struct JsonClient {
    client: reqwest::blocking::Client,
    base: String,
    retry: RetryPolicy,
    limiter: Limiter,
    name: String,
}

impl JsonClient {
    fn new(id: &BackendId) -> Result<Self, BackendError> {
        id.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(id.options.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Config(format!("http client: {e}")))?;
        Ok(Self {
            client,
            base: id.locator().trim_end_matches('/').to_string(),
            retry: RetryPolicy {
                attempts: id.options.retry_attempts.max(1),
                initial_backoff: Duration::from_millis(id.options.initial_backoff_ms),
            },
            limiter: Limiter::new(id.options.max_in_flight),
            name: format!("{} {}", id.kind, id.locator()),
        })
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let _permit = self.limiter.acquire();
        let resp = self.client.post(url).json(body).send().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout(format!("{url}: {e}")))
            } else {
                Failure::Transient(BackendError::Unavailable {
                    backend: self.name.clone(),
                    reason: e.to_string(),
                })
            }
        })?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Transient(BackendError::Unavailable {
                backend: self.name.clone(),
                reason: format!("HTTP {status}"),
            }));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::BadResponse(format!(
                "{url}: HTTP {status}"
            ))));
        }
        resp.json::<Value>().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(BackendError::Timeout(format!("{url}: {e}")))
            } else {
                Failure::Fatal(BackendError::BadResponse(format!("{url}: {e}")))
            }
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}{path}", self.base);
        let mut attempt = 1;
        loop {
            match self.post_once(&url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(e)) if attempt >= self.retry.attempts => return Err(e),
                Err(Failure::Transient(e)) => {
                    let wait = self.retry.backoff(attempt);
                    log::warn!("{e}; retrying in {wait:?} (attempt {attempt})");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }
}

fn png_data_url(img: &RgbImage) -> Result<String, BackendError> {
    Ok(format!("data:image/png;base64,{}", png_base64(img)?))
}

fn png_base64(img: &RgbImage) -> Result<String, BackendError> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| BackendError::Config(format!("png encoding failed: {e}")))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
}

pub struct HttpMllm {
    client: JsonClient,
    model: String,
    temperature: f64,
}

impl HttpMllm {
    pub fn new(id: &BackendId) -> Result<Self, BackendError> {
        Ok(Self {
            client: JsonClient::new(id)?,
            model: id.model_tag.clone(),
            temperature: id.options.temperature,
        })
    }
}

/// Request body for `POST /v1/chat/completions`.
pub fn chat_request(model: &str, prompt: &str, image_url: &str, temperature: f64) -> Value {
    json!({
        "model": model,
        "temperature": temperature,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": image_url}}
            ]
        }]
    })
}

impl Mllm for HttpMllm {
    fn generate(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        let body = chat_request(
            &self.model,
            prompt,
            &png_data_url(&image.pixels)?,
            self.temperature,
        );
        let reply = self.client.post("/v1/chat/completions", &body)?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::BadResponse("missing choices[0].message.content".into())
            })
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    embedding: Vec<f64>,
}

fn embed(client: &JsonClient, model: &str, input: &str, modality: &str) -> Result<Embedding, BackendError> {
    let body = json!({"model": model, "input": input, "modality": modality});
    let reply = client.post("/v1/embeddings", &body)?;
    let parsed: EmbeddingReply = serde_json::from_value(reply)
        .map_err(|e| BackendError::BadResponse(format!("embedding reply: {e}")))?;
    Embedding::new(parsed.embedding)
}

pub struct HttpTextEncoder {
    client: JsonClient,
    model: String,
}

impl HttpTextEncoder {
    pub fn new(id: &BackendId) -> Result<Self, BackendError> {
        Ok(Self {
            client: JsonClient::new(id)?,
            model: id.model_tag.clone(),
        })
    }
}

impl TextEncoder for HttpTextEncoder {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        embed(&self.client, &self.model, text, "text")
    }
}

pub struct HttpImageEncoder {
    client: JsonClient,
    model: String,
    resolution: u32,
}

impl HttpImageEncoder {
    pub fn new(id: &BackendId, resolution: u32) -> Result<Self, BackendError> {
        Ok(Self {
            client: JsonClient::new(id)?,
            model: id.model_tag.clone(),
            resolution,
        })
    }
}

impl ImageEncoder for HttpImageEncoder {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError> {
        check_resolution(img, self.resolution)?;
        embed(&self.client, &self.model, &png_base64(&img.pixels)?, "image")
    }
}

/// External chunker: `POST /v1/noun_phrases {text}` → `{phrases: [...]}`.
pub struct HttpNounPhrases {
    client: JsonClient,
}

impl HttpNounPhrases {
    pub fn new(id: &BackendId) -> Result<Self, BackendError> {
        Ok(Self {
            client: JsonClient::new(id)?,
        })
    }
}

#[derive(Deserialize)]
struct PhrasesReply {
    phrases: Vec<String>,
}

impl NounPhraseExtractor for HttpNounPhrases {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let reply = self.client.post("/v1/noun_phrases", &json!({"text": text}))?;
        let parsed: PhrasesReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::BadResponse(format!("noun phrase reply: {e}")))?;
        Ok(parsed.phrases)
    }
}
