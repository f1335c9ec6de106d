//! Backends answering from precomputed response tables.
//!
//! A table file is `{"v":1, "kind", "model_tag", "entries": {digest: response}}`
//! where `digest` is the [`CacheKey`] of the request, i.e. the same key the
//! disk cache uses. Outputs exported from a real model run can therefore be
//! replayed without the model.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cache::CacheKey;
use super::{
    check_resolution, instance_digest, BackendError, BackendKind, Embedding, ImageEncoder,
    ImageRef, ImageRequest, Mllm, MllmRequest, NounPhraseExtractor, TextEncoder, TextRequest,
};
use crate::masks::InstanceImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseTable {
    pub v: u32,
    pub kind: BackendKind,
    #[serde(default)]
    pub model_tag: String,
    pub entries: HashMap<String, serde_json::Value>,
}

impl ResponseTable {
    pub fn new(kind: BackendKind, model_tag: &str) -> Self {
        Self {
            v: 1,
            kind,
            model_tag: model_tag.to_string(),
            entries: HashMap::new(),
        }
    }

    pub fn load(path: &Path, kind: BackendKind, model_tag: &str) -> Result<Self, BackendError> {
        let bytes = fs::read(path).map_err(|e| {
            BackendError::Config(format!("cannot read table {}: {e}", path.display()))
        })?;
        let table: Self = serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Config(format!("bad table {}: {e}", path.display())))?;
        if table.v != 1 {
            return Err(BackendError::Config(format!(
                "unsupported table version {}",
                table.v
            )));
        }
        if table.kind != kind || table.model_tag != model_tag {
            return Err(BackendError::Config(format!(
                "table {} holds {}/{}, expected {kind}/{model_tag}",
                path.display(),
                table.kind,
                table.model_tag
            )));
        }
        Ok(table)
    }

    pub fn insert<P: Serialize, R: Serialize>(
        &mut self,
        payload: &P,
        response: &R,
    ) -> Result<(), BackendError> {
        let key = CacheKey::for_request(self.kind, &self.model_tag, payload)?;
        let value = serde_json::to_value(response)
            .map_err(|e| BackendError::Config(format!("cannot serialize response: {e}")))?;
        self.entries.insert(key.digest().to_string(), value);
        Ok(())
    }

    fn get<P: Serialize, R: DeserializeOwned>(&self, payload: &P) -> Result<R, BackendError> {
        let key = CacheKey::for_request(self.kind, &self.model_tag, payload)?;
        let value = self
            .entries
            .get(key.digest())
            .ok_or_else(|| BackendError::MissingEntry {
                digest: key.digest().to_string(),
            })?;
        serde_json::from_value(value.clone())
            .map_err(|e| BackendError::BadResponse(format!("table entry {}: {e}", key.digest())))
    }
}

pub struct FileMllm(ResponseTable);

impl FileMllm {
    pub fn open(path: &Path, model_tag: &str) -> Result<Self, BackendError> {
        ResponseTable::load(path, BackendKind::Mllm, model_tag).map(Self)
    }
}

impl Mllm for FileMllm {
    fn generate(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        self.0.get(&MllmRequest {
            image: image.digest(),
            prompt,
        })
    }
}

pub struct FileTextEncoder(ResponseTable);

impl FileTextEncoder {
    pub fn open(path: &Path, model_tag: &str) -> Result<Self, BackendError> {
        ResponseTable::load(path, BackendKind::TextEncoder, model_tag).map(Self)
    }
}

impl TextEncoder for FileTextEncoder {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        self.0.get(&TextRequest { text })
    }
}

pub struct FileImageEncoder {
    table: ResponseTable,
    resolution: u32,
}

impl FileImageEncoder {
    pub fn open(path: &Path, model_tag: &str, resolution: u32) -> Result<Self, BackendError> {
        Ok(Self {
            table: ResponseTable::load(path, BackendKind::ImageEncoder, model_tag)?,
            resolution,
        })
    }
}

impl ImageEncoder for FileImageEncoder {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError> {
        check_resolution(img, self.resolution)?;
        let digest = instance_digest(img);
        self.table.get(&ImageRequest { image: &digest })
    }
}

pub struct FileNounPhrases(ResponseTable);

impl FileNounPhrases {
    pub fn open(path: &Path, model_tag: &str) -> Result<Self, BackendError> {
        ResponseTable::load(path, BackendKind::NpExtractor, model_tag).map(Self)
    }
}

impl NounPhraseExtractor for FileNounPhrases {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        self.0.get(&TextRequest { text })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;
    use std::sync::Arc;

    fn write(dir: &Path, table: &ResponseTable) -> std::path::PathBuf {
        let p = dir.join(format!("{}.json", table.kind));
        fs::write(&p, serde_json::to_vec(table).unwrap()).unwrap();
        p
    }

    #[test]
    fn text_table_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ResponseTable::new(BackendKind::TextEncoder, "clip");
        t.insert(&TextRequest { text: "dog" }, &vec![0.5, 0.5]).unwrap();
        let p = write(dir.path(), &t);
        let enc = FileTextEncoder::open(&p, "clip").unwrap();
        assert_eq!(enc.encode_text("dog").unwrap().values(), &[0.5, 0.5]);
        assert!(matches!(enc.encode_text("cat"), Err(BackendError::MissingEntry { .. })));
        assert!(matches!(FileTextEncoder::open(&p, "other"), Err(BackendError::Config(_))));
    }

    #[test]
    fn invalid_embedding_in_table_is_bad_response() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = ResponseTable::new(BackendKind::TextEncoder, "");
        t.insert(&TextRequest { text: "z" }, &vec![0.0, 0.0]).unwrap();
        let enc = FileTextEncoder::open(&write(dir.path(), &t), "").unwrap();
        assert!(matches!(enc.encode_text("z"), Err(BackendError::BadResponse(_))));
    }

    #[test]
    fn mllm_table_keys_on_image_and_prompt() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageRef::new("a", Arc::new(RgbImage::new(2, 2)));
        let other = ImageRef::new("b", Arc::new(RgbImage::new(3, 2)));
        let mut t = ResponseTable::new(BackendKind::Mllm, "llava");
        t.insert(&MllmRequest { image: img.digest(), prompt: "p" }, &"A photo of cat (black)")
            .unwrap();
        let m = FileMllm::open(&write(dir.path(), &t), "llava").unwrap();
        assert_eq!(m.generate(&img, "p").unwrap(), "A photo of cat (black)");
        assert!(m.generate(&other, "p").is_err());
        assert!(m.generate(&img, "q").is_err());
    }
}
