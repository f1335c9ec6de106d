//! Deterministic offline backends.
//!
//! The hash stubs derive every output from a SHA-256 of the request bytes
//! and a fixed seed. The planted stubs look designated inputs up in a
//! fixture file and fall back to the hash stubs for everything else, which
//! lets tests force a chosen proposal to win.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_resolution, instance_digest, BackendError, Embedding, ImageEncoder, ImageRef, Mllm,
    TextEncoder,
};
use crate::masks::InstanceImage;
use crate::prompts::PromptKind;

const SURROUNDING_MARKER: &str = "surrounded by (entities)";

fn seeded_digest(seed: u64, domain: &str, bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(bytes);
    h.finalize().into()
}

fn hash_embedding(seed: u64, domain: &str, bytes: &[u8], dim: usize) -> Embedding {
    let mut rng = ChaCha20Rng::from_seed(seeded_digest(seed, domain, bytes));
    loop {
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if let Ok(e) = Embedding::new(values) {
            return e;
        }
    }
}

const ATTRIBUTE_REPLIES: &[&str] = &[
    "A photo of person (wearing a dark jacket)",
    "A photo of dog (with brown fur)",
    "A photo of car (parked on the left side)",
    "A photo of chair (made of light wood)",
    "A photo of woman (holding a phone)",
];

const SURROUNDING_REPLIES: &[&str] = &[
    "A photo of person surrounded by (a table, two chairs and a lamp)",
    "A photo of dog surrounded by (a sofa and a rug)",
    "A photo of car surrounded by (a tree, a bicycle and a street sign)",
    "A photo of chair surrounded by (a desk, a window and a plant)",
    "A photo of woman surrounded by (a bus, a bench and a man)",
];

fn prompt_kind(prompt: &str) -> PromptKind {
    if prompt.contains(SURROUNDING_MARKER) {
        PromptKind::Surrounding
    } else {
        PromptKind::Attribute
    }
}

/// Canned MLLM: picks a reply for the prompt's kind by prompt digest.
pub struct StubMllm {
    seed: u64,
}

impl StubMllm {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl Mllm for StubMllm {
    fn generate(&self, _image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        let d = seeded_digest(self.seed, "mllm", prompt.as_bytes());
        let table = match prompt_kind(prompt) {
            PromptKind::Attribute => ATTRIBUTE_REPLIES,
            PromptKind::Surrounding => SURROUNDING_REPLIES,
        };
        let idx = u64::from_le_bytes(d[..8].try_into().unwrap()) as usize % table.len();
        Ok(table[idx].to_string())
    }
}

pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim: dim.max(1), seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyText);
        }
        Ok(hash_embedding(self.seed, "text", text.as_bytes(), self.dim))
    }
}

pub struct HashImageEncoder {
    dim: usize,
    seed: u64,
    resolution: u32,
}

impl HashImageEncoder {
    pub fn new(dim: usize, seed: u64, resolution: u32) -> Self {
        Self {
            dim: dim.max(1),
            seed,
            resolution,
        }
    }
}

impl ImageEncoder for HashImageEncoder {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError> {
        check_resolution(img, self.resolution)?;
        Ok(hash_embedding(
            self.seed,
            "image",
            instance_digest(img).as_bytes(),
            self.dim,
        ))
    }
}

/// Fixture file for the planted stubs. Keys: exact text, instance-image
/// digest ([`instance_digest`]), exact prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedFixture {
    #[serde(default = "one")]
    pub v: u32,
    #[serde(default)]
    pub text: HashMap<String, Embedding>,
    #[serde(default)]
    pub image: HashMap<String, Embedding>,
    #[serde(default)]
    pub mllm: HashMap<String, String>,
}

fn one() -> u32 {
    1
}

impl Default for PlantedFixture {
    fn default() -> Self {
        Self {
            v: 1,
            text: HashMap::new(),
            image: HashMap::new(),
            mllm: HashMap::new(),
        }
    }
}

impl PlantedFixture {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let bytes = fs::read(path).map_err(|e| {
            BackendError::Config(format!("cannot read fixture {}: {e}", path.display()))
        })?;
        let fx: Self = serde_json::from_slice(&bytes).map_err(|e| {
            BackendError::Config(format!("bad fixture {}: {e}", path.display()))
        })?;
        if fx.v != 1 {
            return Err(BackendError::Config(format!(
                "unsupported fixture version {}",
                fx.v
            )));
        }
        Ok(fx)
    }
}

pub struct PlantedMllm {
    table: HashMap<String, String>,
    fallback: StubMllm,
}

impl PlantedMllm {
    pub fn open(path: &Path, seed: u64) -> Result<Self, BackendError> {
        Ok(Self {
            table: PlantedFixture::load(path)?.mllm,
            fallback: StubMllm::new(seed),
        })
    }
}

impl Mllm for PlantedMllm {
    fn generate(&self, image: &ImageRef, prompt: &str) -> Result<String, BackendError> {
        match self.table.get(prompt) {
            Some(reply) => Ok(reply.clone()),
            None => self.fallback.generate(image, prompt),
        }
    }
}

pub struct PlantedTextEncoder {
    table: HashMap<String, Embedding>,
    fallback: HashTextEncoder,
}

impl PlantedTextEncoder {
    pub fn from_table(table: HashMap<String, Embedding>, dim: usize, seed: u64) -> Self {
        Self {
            table,
            fallback: HashTextEncoder::new(dim, seed),
        }
    }

    pub fn open(path: &Path, dim: usize, seed: u64) -> Result<Self, BackendError> {
        Ok(Self::from_table(PlantedFixture::load(path)?.text, dim, seed))
    }
}

impl TextEncoder for PlantedTextEncoder {
    fn encode_text(&self, text: &str) -> Result<Embedding, BackendError> {
        match self.table.get(text) {
            Some(e) => Ok(e.clone()),
            None => self.fallback.encode_text(text),
        }
    }
}

pub struct PlantedImageEncoder {
    table: HashMap<String, Embedding>,
    fallback: HashImageEncoder,
}

impl PlantedImageEncoder {
    pub fn from_table(
        table: HashMap<String, Embedding>,
        dim: usize,
        seed: u64,
        resolution: u32,
    ) -> Self {
        Self {
            table,
            fallback: HashImageEncoder::new(dim, seed, resolution),
        }
    }

    pub fn open(path: &Path, dim: usize, seed: u64, resolution: u32) -> Result<Self, BackendError> {
        Ok(Self::from_table(
            PlantedFixture::load(path)?.image,
            dim,
            seed,
            resolution,
        ))
    }
}

impl ImageEncoder for PlantedImageEncoder {
    fn encode_image(&self, img: &InstanceImage) -> Result<Embedding, BackendError> {
        check_resolution(img, self.fallback.resolution)?;
        match self.table.get(&instance_digest(img)) {
            Some(e) => Ok(e.clone()),
            None => self.fallback.encode_image(img),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::Strategy;
    use crate::prompts::build_prompt;
    use image::{Rgb, RgbImage};
    use std::collections::HashSet;
    use std::sync::Arc;

    fn img_ref() -> ImageRef {
        ImageRef::new("img", Arc::new(RgbImage::new(2, 2)))
    }

    #[test]
    fn stub_mllm_is_deterministic_and_kind_aware() {
        let m = StubMllm::new(0);
        let att = build_prompt(PromptKind::Attribute, "left dog").unwrap();
        let sur = build_prompt(PromptKind::Surrounding, "left dog").unwrap();
        let a1 = m.generate(&img_ref(), &att).unwrap();
        assert_eq!(a1, m.generate(&img_ref(), &att).unwrap());
        assert!(a1.starts_with("A photo of") && !a1.contains("surrounded by"));
        let s1 = m.generate(&img_ref(), &sur).unwrap();
        assert!(s1.contains("surrounded by ("));
    }

    #[test]
    fn hash_text_encoder_determinism() {
        let e = HashTextEncoder::new(16, 3);
        assert_eq!(e.encode_text("a").unwrap(), e.encode_text("a").unwrap());
        assert_ne!(e.encode_text("a").unwrap(), e.encode_text("b").unwrap());
        assert!(matches!(e.encode_text(""), Err(BackendError::EmptyText)));
        let other_seed = HashTextEncoder::new(16, 4);
        assert_ne!(e.encode_text("a").unwrap(), other_seed.encode_text("a").unwrap());
    }

    #[test]
    fn hash_text_encoder_has_no_collisions_on_corpus() {
        let e = HashTextEncoder::new(8, 0);
        let mut seen = HashSet::new();
        for i in 0..2000 {
            let v = e.encode_text(&format!("phrase {i}")).unwrap();
            let key: Vec<u64> = v.values().iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(key), "collision at {i}");
        }
    }

    #[test]
    fn hash_image_encoder_pixels_and_resolution() {
        let e = HashImageEncoder::new(8, 0, 4);
        let a = InstanceImage { pixels: RgbImage::new(4, 4), strategy: Strategy::MaskBlur };
        let mut b = a.clone();
        b.pixels.put_pixel(3, 3, Rgb([0, 0, 1]));
        assert_eq!(e.encode_image(&a).unwrap(), e.encode_image(&a.clone()).unwrap());
        assert_ne!(e.encode_image(&a).unwrap(), e.encode_image(&b).unwrap());
        let wrong = InstanceImage { pixels: RgbImage::new(5, 4), strategy: Strategy::MaskBlur };
        assert!(matches!(e.encode_image(&wrong), Err(BackendError::BadResolution { .. })));
    }

    #[test]
    fn planted_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let inst = InstanceImage { pixels: RgbImage::new(4, 4), strategy: Strategy::MaskCrop };
        let mut fx = PlantedFixture { v: 1, ..Default::default() };
        fx.text.insert("man".into(), Embedding::new(vec![1.0, 0.0]).unwrap());
        fx.image.insert(instance_digest(&inst), Embedding::new(vec![0.0, 2.0]).unwrap());
        fx.mllm.insert("hello".into(), "A photo of x (y)".into());
        let path = dir.path().join("fx.json");
        fs::write(&path, serde_json::to_vec(&fx).unwrap()).unwrap();

        let t = PlantedTextEncoder::open(&path, 2, 0).unwrap();
        assert_eq!(t.encode_text("man").unwrap().values(), &[1.0, 0.0]);
        assert_eq!(t.encode_text("other").unwrap().dim(), 2);

        let i = PlantedImageEncoder::open(&path, 2, 0, 4).unwrap();
        assert_eq!(i.encode_image(&inst).unwrap().values(), &[0.0, 2.0]);

        let m = PlantedMllm::open(&path, 0).unwrap();
        assert_eq!(m.generate(&img_ref(), "hello").unwrap(), "A photo of x (y)");
    }

    #[test]
    fn planted_fixture_rejects_zero_embedding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        fs::write(&path, r#"{"v":1,"text":{"a":[0.0,0.0]}}"#).unwrap();
        assert!(matches!(PlantedFixture::load(&path), Err(BackendError::Config(_))));
    }
}
