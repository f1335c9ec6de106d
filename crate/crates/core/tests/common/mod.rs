//! Synthetic datasets shared by the integration tests.
//!
//! The planted dataset has ten samples whose backends answer from a fixture
//! table: every text and every rendered proposal maps to a hand-chosen
//! vector, so each proposal's three raw scores are known in advance.
#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg_core::backends::stub::PlantedFixture;
use refseg_core::backends::{instance_digest, BackendId, BackendKind, Embedding};
use refseg_core::dataset::{ManifestRecord, MaskRecord, ProposalFile, ProposalSource, Split};
use refseg_core::masks::{render, rle_encode, BinaryMask, RenderConfig, Strategy};
use refseg_core::pipeline::PipelineConfig;
use refseg_core::prompts::{build_prompt, PromptKind};

pub const DIM: usize = 8;
pub const WIDTH: u32 = 40;
pub const HEIGHT: u32 = 32;
pub const RESOLUTION: u32 = 32;

const SURROUNDING_REPLY: &str = "A photo of man surrounded by (lamp)";

fn axis(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; DIM];
    v[i] = 1.0;
    v
}

/// Unit vector with the given cosines to the expression, attribute and
/// negative-phrase axes; the rest of the length sits on a spare axis.
pub fn planted_vector(s_van: f64, s_att: f64, neg: f64) -> Vec<f64> {
    let rest = 1.0 - s_van * s_van - s_att * s_att - neg * neg;
    assert!(rest >= 0.0);
    let mut v = vec![0.0; DIM];
    v[0] = s_van;
    v[1] = s_att;
    v[2] = neg;
    v[5] = rest.sqrt();
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Easy,
    AttributeDecides,
    SurroundingDecides,
    BothNeeded,
}

/// `(s_van, s_att, negative cosine)` per proposal and the target index.
fn layout(kind: Kind, variant: usize) -> (Vec<(f64, f64, f64)>, usize) {
    let (mut props, target) = match kind {
        Kind::Easy => (vec![(0.3, 0.1, 0.2), (0.7, 0.3, 0.0)], 1),
        Kind::AttributeDecides => (vec![(0.6, 0.0, 0.0), (0.5, 0.6, 0.0)], 1),
        Kind::SurroundingDecides => (vec![(0.6, 0.0, 0.5), (0.5, 0.0, 0.0)], 1),
        Kind::BothNeeded => (vec![(0.6, 0.5, 0.5), (0.6, 0.0, 0.0), (0.5, 0.45, 0.0)], 2),
    };
    // rotate so targets are not always last
    let shift = variant % props.len();
    props.rotate_left(shift);
    let target = (target + props.len() - shift) % props.len();
    (props, target)
}

pub const KINDS: [(Kind, usize); 10] = [
    (Kind::Easy, 0),
    (Kind::Easy, 1),
    (Kind::AttributeDecides, 0),
    (Kind::AttributeDecides, 1),
    (Kind::AttributeDecides, 2),
    (Kind::SurroundingDecides, 0),
    (Kind::SurroundingDecides, 1),
    (Kind::SurroundingDecides, 2),
    (Kind::BothNeeded, 0),
    (Kind::BothNeeded, 1),
];

fn proposal_mask(j: usize) -> BinaryMask {
    let x0 = 10 * j as u32 + 1;
    BinaryMask::from_fn(WIDTH, HEIGHT, |x, y| (x0..x0 + 7).contains(&x) && (4..28).contains(&y))
        .unwrap()
}

fn noise_image(seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(WIDTH, HEIGHT, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
}

pub struct PlantedDataset {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub proposals_dir: PathBuf,
    pub fixture: PathBuf,
    pub sample_ids: Vec<String>,
    pub kinds: Vec<Kind>,
    /// Engineered proposal index per sample, manifest order.
    pub targets: Vec<usize>,
}

pub fn render_config() -> RenderConfig {
    RenderConfig {
        encoder_resolution: RESOLUTION,
        ..RenderConfig::default()
    }
}

fn planted_backend(kind: BackendKind, fixture: &Path) -> BackendId {
    let mut id = BackendId::stub(kind);
    id.endpoint_or_path = Some(fixture.display().to_string());
    id.options.dim = DIM;
    id
}

/// Config wiring all three model backends to the fixture.
pub fn planted_config(ds: &PlantedDataset, cache: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        render: render_config(),
        cache_dir: Some(cache.to_path_buf()),
        ..PipelineConfig::default()
    };
    for kind in [BackendKind::Mllm, BackendKind::TextEncoder, BackendKind::ImageEncoder] {
        cfg.backends.insert(kind, planted_backend(kind, &ds.fixture));
    }
    cfg
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) {
    fs::write(path, serde_json::to_vec(v).unwrap()).unwrap();
}

fn write_manifest(path: &Path, recs: &[ManifestRecord]) {
    let body: String = recs
        .iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

pub fn build_planted(root: &Path) -> PlantedDataset {
    let images = root.join("images");
    let proposals_dir = root.join("proposals");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&proposals_dir).unwrap();
    let rcfg = render_config();
    let emb = |v: Vec<f64>| Embedding::new(v).unwrap();

    let mut fx = PlantedFixture::default();
    fx.text.insert("man".into(), emb(axis(4)));
    fx.text.insert("lamp".into(), emb(axis(2)));

    let mut records = Vec::new();
    let mut ds = PlantedDataset {
        root: root.to_path_buf(),
        manifest: root.join("manifest.jsonl"),
        proposals_dir: proposals_dir.clone(),
        fixture: root.join("fixture.json"),
        sample_ids: Vec::new(),
        kinds: Vec::new(),
        targets: Vec::new(),
    };
    for (k, &(kind, variant)) in KINDS.iter().enumerate() {
        let sample_id = format!("planted_{k:02}");
        let image_id = format!("img_{k:02}");
        let expression = format!("the person in scene {k}");
        let t_att = format!("A photo of man (variant {k})");
        fx.text.insert(expression.clone(), emb(axis(0)));
        fx.text.insert(t_att.clone(), emb(axis(1)));
        fx.mllm.insert(build_prompt(PromptKind::Attribute, &expression).unwrap(), t_att);
        fx.mllm.insert(
            build_prompt(PromptKind::Surrounding, &expression).unwrap(),
            SURROUNDING_REPLY.into(),
        );

        let img = noise_image(1000 + k as u64);
        img.save(images.join(format!("{image_id}.png"))).unwrap();
        let (props, target) = layout(kind, variant);
        let mut file = ProposalFile {
            v: 1,
            image_id: image_id.clone(),
            source_tag: ProposalSource::Sam,
            proposals: Vec::new(),
        };
        for (j, &(s_van, s_att, neg)) in props.iter().enumerate() {
            let mask = proposal_mask(j);
            let v = planted_vector(s_van, s_att, neg);
            for strategy in [Strategy::MaskBlur, Strategy::MaskCrop] {
                let inst = render(strategy, &img, &mask, &rcfg).unwrap();
                let prev = fx.image.insert(instance_digest(&inst), emb(v.clone()));
                assert!(prev.is_none(), "two renderings share a digest");
            }
            file.proposals
                .push(MaskRecord::from_rle(&image_id, &format!("p{j}"), &rle_encode(&mask)));
        }
        write_json(&proposals_dir.join(format!("{image_id}.json")), &file);
        records.push(ManifestRecord {
            v: 1,
            sample_id: sample_id.clone(),
            image_id,
            image_path: format!("images/img_{k:02}.png"),
            expression,
            split: Split::Val,
            gt_mask: rle_encode(&proposal_mask(target)),
        });
        ds.sample_ids.push(sample_id);
        ds.kinds.push(kind);
        ds.targets.push(target);
    }
    write_manifest(&ds.manifest, &records);
    write_json(&ds.fixture, &fx);
    ds
}

/// A dataset for the seeded-hash stubs: random images, random rectangle
/// proposals and ground truths. Scores are arbitrary but deterministic.
pub struct RandomDataset {
    pub manifest: PathBuf,
    pub proposals_dir: PathBuf,
    pub n: usize,
}

pub fn build_random(root: &Path, n: usize, seed: u64) -> RandomDataset {
    let images = root.join("images");
    let proposals_dir = root.join("proposals");
    fs::create_dir_all(&images).unwrap();
    fs::create_dir_all(&proposals_dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = |rng: &mut ChaCha8Rng, w: u32, h: u32| {
        let x0 = rng.gen_range(0..w - 1);
        let y0 = rng.gen_range(0..h - 1);
        let x1 = rng.gen_range(x0 + 1..=w);
        let y1 = rng.gen_range(y0 + 1..=h);
        BinaryMask::from_fn(w, h, |x, y| (x0..x1).contains(&x) && (y0..y1).contains(&y)).unwrap()
    };
    let mut records = Vec::new();
    for k in 0..n {
        let (w, h) = (rng.gen_range(12..30), rng.gen_range(12..30));
        let image_id = format!("r{k}");
        let img = RgbImage::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]));
        img.save(images.join(format!("{image_id}.png"))).unwrap();
        let count = rng.gen_range(1..=4);
        let file = ProposalFile {
            v: 1,
            image_id: image_id.clone(),
            source_tag: ProposalSource::DinoSam,
            proposals: (0..count)
                .map(|j| MaskRecord::from_rle(&image_id, &j.to_string(), &rle_encode(&rect(&mut rng, w, h))))
                .collect(),
        };
        write_json(&proposals_dir.join(format!("{image_id}.json")), &file);
        records.push(ManifestRecord {
            v: 1,
            sample_id: format!("rand_{k:03}"),
            image_id: image_id.clone(),
            image_path: format!("images/{image_id}.png"),
            expression: format!("object number {k} near the {}", ["door", "tree", "car"][k % 3]),
            split: Split::TestA,
            gt_mask: rle_encode(&rect(&mut rng, w, h)),
        });
    }
    let manifest = root.join("manifest.jsonl");
    write_manifest(&manifest, &records);
    RandomDataset {
        manifest,
        proposals_dir,
        n,
    }
}

pub fn stub_config(cache: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        render: render_config(),
        cache_dir: Some(cache.to_path_buf()),
        ..PipelineConfig::default()
    };
    for kind in [BackendKind::TextEncoder, BackendKind::ImageEncoder] {
        let mut id = BackendId::stub(kind);
        id.options.dim = 16;
        cfg.backends.insert(kind, id);
    }
    cfg
}

/// Serialized selections, for byte-level comparison between runs.
pub fn selection_bytes(results: &[refseg_core::pipeline::SampleResult]) -> HashMap<String, Vec<u8>> {
    results
        .iter()
        .map(|r| (r.sample_id.clone(), serde_json::to_vec(&r.selected_proposal).unwrap()))
        .collect()
}
