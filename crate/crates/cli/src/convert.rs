//! Converts a COCO-style referring-expression dump into `manifest.jsonl`.
//!
//! Input layout:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "file_name": "a.jpg", "width": 640, "height": 480}],
//!   "annotations": [{"id": 7, "image_id": 1,
//!                    "segmentation": {"size": [480, 640], "counts": [..]}}],
//!   "refs": [{"ref_id": 3, "ann_id": 7, "image_id": 1, "split": "testA",
//!             "sentences": [{"sent_id": 11, "sent": "man on the left"}]}]
//! }
//! ```
//!
//! Segmentations must be uncompressed column-major RLE; polygon and
//! compressed-string forms are rejected.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use refseg_core::dataset::{is_safe_id, ManifestRecord, Split, SCHEMA_VERSION};
use refseg_core::masks::RleCounts;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Deserialize)]
#[serde(untagged)]
enum Id {
    Int(u64),
    Str(String),
}

impl fmt::Display for Id {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Id::Int(v) => write!(f, "{v}"),
            Id::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Deserialize)]
struct Image {
    id: Id,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct Segmentation {
    size: [u32; 2],
    counts: serde_json::Value,
}

#[derive(Deserialize)]
struct Annotation {
    id: Id,
    image_id: Id,
    segmentation: serde_json::Value,
}

#[derive(Deserialize)]
struct Sentence {
    sent_id: Id,
    sent: String,
}

#[derive(Deserialize)]
struct Ref {
    ref_id: Id,
    ann_id: Id,
    image_id: Id,
    split: Split,
    sentences: Vec<Sentence>,
}

#[derive(Deserialize)]
struct Input {
    images: Vec<Image>,
    annotations: Vec<Annotation>,
    refs: Vec<Ref>,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct ConvertReport {
    pub written: usize,
    pub filtered: usize,
}

fn uncompressed_rle(seg: &serde_json::Value, image: &Image) -> Result<RleCounts> {
    if seg.is_array() {
        bail!("polygon segmentation; convert to uncompressed RLE first");
    }
    let seg: Segmentation = serde_json::from_value(seg.clone())?;
    let counts: Vec<u32> = match &seg.counts {
        serde_json::Value::String(_) => bail!("compressed RLE string; decode to count list first"),
        other => serde_json::from_value(other.clone())?,
    };
    let [h, w] = seg.size;
    if (w, h) != (image.width, image.height) {
        bail!("segmentation size {w}x{h} differs from image {}x{}", image.width, image.height);
    }
    let rle = RleCounts { width: w, height: h, counts };
    rle.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(rle)
}

fn image_path_for(file: &Path, manifest_dir: &Path) -> String {
    let abs = fs::canonicalize(file).unwrap_or_else(|_| file.to_path_buf());
    let base = fs::canonicalize(manifest_dir).unwrap_or_else(|_| manifest_dir.to_path_buf());
    match abs.strip_prefix(&base) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => abs.to_string_lossy().into_owned(),
    }
}

/// Writes one manifest line per sentence, in input order.
pub fn convert(input: &Path, images_dir: &Path, out: &Path, split: Option<Split>) -> Result<ConvertReport> {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let data: Input =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", input.display()))?;
    let images: HashMap<&Id, &Image> = data.images.iter().map(|i| (&i.id, i)).collect();
    let anns: HashMap<&Id, &Annotation> = data.annotations.iter().map(|a| (&a.id, a)).collect();

    let manifest_dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&manifest_dir)?;

    let mut lines = Vec::new();
    let mut report = ConvertReport::default();
    for r in &data.refs {
        if split.is_some_and(|s| s != r.split) {
            report.filtered += r.sentences.len();
            continue;
        }
        let ctx = || format!("ref {}", r.ref_id);
        let ann = anns.get(&r.ann_id).ok_or_else(|| anyhow!("unknown annotation {}", r.ann_id)).with_context(ctx)?;
        if ann.image_id != r.image_id {
            bail!("ref {}: annotation {} belongs to image {}", r.ref_id, ann.id, ann.image_id);
        }
        let image = images.get(&r.image_id).ok_or_else(|| anyhow!("unknown image {}", r.image_id)).with_context(ctx)?;
        let gt = uncompressed_rle(&ann.segmentation, image).with_context(ctx)?;
        let image_id = image.id.to_string();
        if !is_safe_id(&image_id) {
            bail!("image id {image_id:?} contains unsupported characters");
        }
        let image_path = image_path_for(&images_dir.join(&image.file_name), &manifest_dir);
        for s in &r.sentences {
            let sample_id = format!("{}_{}", r.ref_id, s.sent_id);
            if !is_safe_id(&sample_id) {
                bail!("sample id {sample_id:?} contains unsupported characters");
            }
            let rec = ManifestRecord {
                v: SCHEMA_VERSION,
                sample_id,
                image_id: image_id.clone(),
                image_path: image_path.clone(),
                expression: s.sent.trim().to_string(),
                split: r.split,
                gt_mask: gt.clone(),
            };
            lines.push(serde_json::to_string(&rec)?);
        }
    }
    let mut f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    for l in &lines {
        writeln!(f, "{l}")?;
    }
    report.written = lines.len();
    Ok(report)
}
