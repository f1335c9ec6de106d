//! Normalized dataset manifests and proposal files.
//!
//! `manifest.jsonl` holds one [`ManifestRecord`] per line; proposals live in
//! `<dir>/<image_id>.json` as a [`ProposalFile`]. Both carry `"v": 1`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{MaskError, RleCounts};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{location}: schema error: {reason}")]
    Schema { location: String, reason: String },
    #[error("sample {sample_id}: image {path} not found")]
    MissingImage { sample_id: String, path: PathBuf },
    #[error("{what}: mask is {mask:?} but image is {image:?}")]
    DimMismatch {
        what: String,
        image: (u32, u32),
        mask: (u32, u32),
    },
    #[error("proposal file {0} not found")]
    NotFound(PathBuf),
    #[error("image {image_id}: proposal set is empty")]
    EmptyProposalSet { image_id: String },
    #[error("{} invalid manifest record(s); first: {}", .0.len(), .0[0])]
    InvalidRecords(Vec<DatasetError>),
}

impl DatasetError {
    fn schema(location: impl Into<String>, reason: impl ToString) -> Self {
        DatasetError::Schema {
            location: location.into(),
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
    #[serde(rename = "val_u")]
    ValU,
    #[serde(rename = "test_u")]
    TestU,
    #[serde(rename = "test_g")]
    TestG,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub v: u32,
    pub sample_id: String,
    pub image_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: String,
    pub expression: String,
    pub split: Split,
    pub gt_mask: RleCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefSample {
    pub sample_id: String,
    pub image_id: String,
    pub image_path: PathBuf,
    pub expression: String,
    pub gt_mask: RleCounts,
    pub split: Split,
}

/// Ids become file names, so they are restricted to a portable charset.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn check_mask(location: &str, rle: &RleCounts) -> Result<(), DatasetError> {
    rle.validate()
        .map_err(|e: MaskError| DatasetError::schema(location, e))
}

/// Streams validated samples from a manifest, one per non-blank line.
pub struct ManifestReader {
    path: PathBuf,
    base: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    seen: HashSet<String>,
}

impl ManifestReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = File::open(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
            seen: HashSet::new(),
        })
    }

    fn parse(&mut self, line: &str) -> Result<RefSample, DatasetError> {
        let loc = format!("{}:{}", self.path.display(), self.line_no);
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| DatasetError::schema(&loc, e))?;
        if rec.v != SCHEMA_VERSION {
            return Err(DatasetError::schema(&loc, format!("unsupported version {}", rec.v)));
        }
        let loc = format!("{loc} (sample {})", rec.sample_id);
        if !is_safe_id(&rec.sample_id) || !is_safe_id(&rec.image_id) {
            return Err(DatasetError::schema(
                &loc,
                "sample_id and image_id must be non-empty [A-Za-z0-9._-]",
            ));
        }
        if rec.expression.trim().is_empty() {
            return Err(DatasetError::schema(&loc, "expression is empty"));
        }
        if !self.seen.insert(rec.sample_id.clone()) {
            return Err(DatasetError::schema(&loc, "duplicate sample_id"));
        }
        check_mask(&loc, &rec.gt_mask)?;
        let image_path = self.base.join(&rec.image_path);
        if !image_path.is_file() {
            return Err(DatasetError::MissingImage {
                sample_id: rec.sample_id,
                path: image_path,
            });
        }
        let dims = image::image_dimensions(&image_path)
            .map_err(|e| DatasetError::schema(&loc, format!("unreadable image: {e}")))?;
        let mask_dims = (rec.gt_mask.width, rec.gt_mask.height);
        if dims != mask_dims {
            return Err(DatasetError::DimMismatch {
                what: format!("sample {}", rec.sample_id),
                image: dims,
                mask: mask_dims,
            });
        }
        Ok(RefSample {
            sample_id: rec.sample_id,
            image_id: rec.image_id,
            image_path,
            expression: rec.expression,
            gt_mask: rec.gt_mask,
            split: rec.split,
        })
    }
}

impl Iterator for ManifestReader {
    type Item = Result<RefSample, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Err(source) => {
                    return Some(Err(DatasetError::Io {
                        path: self.path.clone(),
                        source,
                    }))
                }
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => return Some(self.parse(&l)),
            }
        }
    }
}

#[derive(Debug)]
pub struct LoadedDataset {
    pub samples: Vec<RefSample>,
    /// Records skipped in lenient mode.
    pub skipped: Vec<DatasetError>,
}

/// Loads every sample in manifest order. Bad records are collected; they
/// are fatal unless `lenient`, in which case they are skipped and reported.
pub fn load_dataset(path: &Path, lenient: bool) -> Result<LoadedDataset, DatasetError> {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for item in ManifestReader::open(path)? {
        match item {
            Ok(s) => samples.push(s),
            Err(e @ DatasetError::Io { .. }) => return Err(e),
            Err(e) => errors.push(e),
        }
    }
    if !errors.is_empty() && !lenient {
        return Err(DatasetError::InvalidRecords(errors));
    }
    for e in &errors {
        log::warn!("skipping record: {e}");
    }
    log::info!("loaded {} samples from {}", samples.len(), path.display());
    Ok(LoadedDataset {
        samples,
        skipped: errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    /// Automatic mask generation.
    Sam,
    /// Detector boxes used as segmenter prompts.
    DinoSam,
}

/// One mask record, shared by proposal files and standalone mask files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub image_id: String,
    pub proposal_id: String,
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl MaskRecord {
    pub fn rle(&self) -> RleCounts {
        RleCounts {
            width: self.width,
            height: self.height,
            counts: self.counts.clone(),
        }
    }

    pub fn from_rle(image_id: &str, proposal_id: &str, rle: &RleCounts) -> Self {
        Self {
            image_id: image_id.to_string(),
            proposal_id: proposal_id.to_string(),
            width: rle.width,
            height: rle.height,
            counts: rle.counts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub v: u32,
    pub image_id: String,
    pub source_tag: ProposalSource,
    pub proposals: Vec<MaskRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub proposal_id: String,
    pub mask: RleCounts,
}

/// Candidate masks for one image, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub source_tag: ProposalSource,
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn dims(&self) -> (u32, u32) {
        let m = &self.proposals[0].mask;
        (m.width, m.height)
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

pub fn proposal_path(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{image_id}.json"))
}

pub fn load_proposals(dir: &Path, image_id: &str) -> Result<ProposalSet, DatasetError> {
    let path = proposal_path(dir, image_id);
    let loc = path.display().to_string();
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(DatasetError::NotFound(path))
        }
        Err(source) => return Err(DatasetError::Io { path, source }),
    };
    let file: ProposalFile =
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::schema(&loc, e))?;
    if file.v != SCHEMA_VERSION {
        return Err(DatasetError::schema(&loc, format!("unsupported version {}", file.v)));
    }
    if file.image_id != image_id {
        return Err(DatasetError::schema(
            &loc,
            format!("file is for image {}", file.image_id),
        ));
    }
    if file.proposals.is_empty() {
        return Err(DatasetError::EmptyProposalSet {
            image_id: image_id.to_string(),
        });
    }
    let dims = (file.proposals[0].width, file.proposals[0].height);
    let mut proposals = Vec::with_capacity(file.proposals.len());
    for (i, rec) in file.proposals.into_iter().enumerate() {
        let ploc = format!("{loc} proposal #{i} ({})", rec.proposal_id);
        if rec.image_id != image_id {
            return Err(DatasetError::schema(&ploc, format!("belongs to image {}", rec.image_id)));
        }
        let rle = rec.rle();
        check_mask(&ploc, &rle)?;
        if (rle.width, rle.height) != dims {
            return Err(DatasetError::DimMismatch {
                what: ploc,
                image: dims,
                mask: (rle.width, rle.height),
            });
        }
        if rle.area() == 0 {
            return Err(DatasetError::schema(&ploc, "proposal has no foreground pixel"));
        }
        proposals.push(Proposal {
            proposal_id: rec.proposal_id,
            mask: rle,
        });
    }
    Ok(ProposalSet {
        image_id: image_id.to_string(),
        source_tag: file.source_tag,
        proposals,
    })
}
