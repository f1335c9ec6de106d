//! End-to-end orchestration of one sample and of a whole split.
//!
//! Per sample: build both prompts, ask the MLLM twice, parse the replies,
//! extract and filter negative phrases, encode the texts, render and encode
//! every proposal under both strategies, score, and select.
//!
//! A split run persists each finished sample under
//! `<out>/samples/<sample_id>.json` together with the config digest, so an
//! interrupted run resumes exactly where it stopped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::cache::DiskCache;
use crate::backends::{BackendError, BackendId, BackendKind, Backends, ImageRef};
use crate::dataset::{load_dataset, load_proposals, DatasetError, ProposalSet, RefSample};
use crate::evaluation::{EvalError, MetricAccumulator, Metrics, ScoredSample};
use crate::masks::{ratio_or_one, rle_decode, render, MaskError, RenderConfig, RleCounts, Strategy};
use crate::prompts::{build_prompt, DescriptionBundle, PromptError, PromptKind};
use crate::scoring::{
    filter_negatives, fuse_visual, raw_scores, select_mask, FusionWeights, ScoreBreakdown,
    ScoringError,
};

pub const RESULT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LoadProposals,
    LoadImage,
    BuildPrompts,
    DescribeAttribute,
    DescribeSurrounding,
    ParseDescriptions,
    ExtractNounPhrases,
    EncodeText,
    FilterNegatives,
    RenderInstances,
    EncodeInstances,
    Score,
    Select,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::LoadProposals => "load_proposals",
            Stage::LoadImage => "load_image",
            Stage::BuildPrompts => "build_prompts",
            Stage::DescribeAttribute => "describe_attribute",
            Stage::DescribeSurrounding => "describe_surrounding",
            Stage::ParseDescriptions => "parse_descriptions",
            Stage::ExtractNounPhrases => "extract_noun_phrases",
            Stage::EncodeText => "encode_text",
            Stage::FilterNegatives => "filter_negatives",
            Stage::RenderInstances => "render_instances",
            Stage::EncodeInstances => "encode_instances",
            Stage::Score => "score",
            Stage::Select => "select",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {sample_id}: stage {stage}: {source}")]
    Stage {
        sample_id: String,
        stage: Stage,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path} belongs to config {found}, current config is {expected}")]
    ConfigMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("run interrupted: {completed} of {total} samples have results")]
    Interrupted { completed: usize, total: usize },
    #[error("sample {0} has no result")]
    NotFound(String),
}

impl PipelineError {
    /// The backend failure underneath a stage error, if any.
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            PipelineError::Stage { source: StageError::Backend(e), .. }
            | PipelineError::Stage {
                source: StageError::Scoring(ScoringError::Backend(e)),
                ..
            }
            | PipelineError::Backend(e) => Some(e),
            _ => None,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Selects the default attribute weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum DatasetTag {
    #[default]
    #[serde(rename = "refcoco")]
    RefCoco,
    #[serde(rename = "refcoco+")]
    RefCocoPlus,
    #[serde(rename = "refcocog")]
    RefCocoG,
}

impl DatasetTag {
    pub fn default_weights(self) -> FusionWeights {
        let alpha = match self {
            DatasetTag::RefCoco | DatasetTag::RefCocoPlus => 0.5,
            DatasetTag::RefCocoG => 0.3,
        };
        FusionWeights { alpha, beta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset_tag: DatasetTag,
    /// Overrides the dataset default when set.
    pub weights: Option<FusionWeights>,
    pub render: RenderConfig,
    /// Negative phrases at least this similar to the referent are dropped.
    pub tau: f64,
    pub normalize_first: bool,
    /// Kinds left out fall back to the seeded stubs.
    pub backends: BTreeMap<BackendKind, BackendId>,
    pub worker_limit: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset_tag: DatasetTag::default(),
            weights: None,
            render: RenderConfig::default(),
            tau: 0.85,
            normalize_first: true,
            backends: BTreeMap::new(),
            worker_limit: 4,
            cache_dir: None,
        }
    }
}

#[derive(Serialize)]
struct DigestBackend<'a> {
    implementation: &'a crate::backends::BackendImpl,
    endpoint_or_path: &'a Option<String>,
    cache_identity: String,
    temperature: f64,
}

#[derive(Serialize)]
struct DigestView<'a> {
    v: u32,
    weights: FusionWeights,
    render: &'a RenderConfig,
    tau: f64,
    normalize_first: bool,
    backends: BTreeMap<BackendKind, DigestBackend<'a>>,
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn weights(&self) -> FusionWeights {
        self.weights.unwrap_or_else(|| self.dataset_tag.default_weights())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if let Err(e) = self.weights().validate() {
            return bad(e.to_string());
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [-1, 1]", self.tau));
        }
        if self.worker_limit == 0 {
            return bad("worker_limit must be at least 1".into());
        }
        let r = &self.render;
        if r.encoder_resolution == 0 {
            return bad("encoder_resolution must be positive".into());
        }
        if !(r.blur_sigma.is_finite() && r.blur_sigma >= 0.0) {
            return bad(format!("blur_sigma {} must be finite and non-negative", r.blur_sigma));
        }
        if !(r.crop_pad_ratio.is_finite() && r.crop_pad_ratio >= 0.0) {
            return bad(format!("crop_pad_ratio {} must be finite and non-negative", r.crop_pad_ratio));
        }
        for (kind, id) in &self.backends {
            if id.kind != *kind {
                return bad(format!("backend under {kind} declares kind {}", id.kind));
            }
            id.validate()?;
        }
        Ok(())
    }

    /// Copy with weights and every backend spelled out.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.weights = Some(self.weights());
        for kind in BackendKind::ALL {
            out.backends.entry(kind).or_insert_with(|| BackendId::stub(kind));
        }
        out
    }

    /// Hash of everything that can change a sample's result. Worker count
    /// and cache location are excluded.
    pub fn digest(&self) -> Result<String, PipelineError> {
        let resolved = self.resolved();
        let mut backends = BTreeMap::new();
        for (kind, id) in &resolved.backends {
            backends.insert(
                *kind,
                DigestBackend {
                    implementation: &id.implementation,
                    endpoint_or_path: &id.endpoint_or_path,
                    cache_identity: id.cache_identity()?,
                    temperature: id.options.temperature,
                },
            );
        }
        let view = DigestView {
            v: RESULT_VERSION,
            weights: resolved.weights(),
            render: &resolved.render,
            tau: resolved.tau,
            normalize_first: resolved.normalize_first,
            backends,
        };
        let bytes = serde_json::to_vec(&view).expect("config view serializes");
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    pub fn build_backends(&self, default_cache: &Path) -> Result<Backends, PipelineError> {
        let root = self.cache_dir.clone().unwrap_or_else(|| default_cache.to_path_buf());
        let cache = Arc::new(DiskCache::open(root)?);
        Ok(Backends::from_ids(&self.backends, cache, self.render.encoder_resolution)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub seconds: f64,
}

/// Per-sample JSON dump of the scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDump {
    pub sample_id: String,
    pub weights: FusionWeights,
    pub breakdowns: Vec<ScoreBreakdown>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub v: u32,
    pub sample_id: String,
    pub image_id: String,
    pub image_path: PathBuf,
    pub config_digest: String,
    pub weights: FusionWeights,
    pub selected_index: usize,
    pub selected_proposal_id: String,
    pub selected_proposal: RleCounts,
    pub gt_mask: RleCounts,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    pub breakdowns: Vec<ScoreBreakdown>,
    /// `(intersection, union)` of every proposal with the ground truth.
    pub proposal_overlaps: Vec<(u64, u64)>,
    pub negatives: Vec<String>,
    pub description_bundle: DescriptionBundle,
    pub timing: Vec<StageTiming>,
}

impl SampleResult {
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Vec::new(),
            ..self.clone()
        }
    }

    pub fn scored(&self) -> ScoredSample {
        ScoredSample {
            sample_id: self.sample_id.clone(),
            raw: self.breakdowns.iter().map(ScoreBreakdown::raw).collect(),
            overlaps: self.proposal_overlaps.clone(),
        }
    }

    pub fn score_dump(&self) -> ScoreDump {
        ScoreDump {
            sample_id: self.sample_id.clone(),
            weights: self.weights,
            breakdowns: self.breakdowns.clone(),
            selected: self.selected_index,
        }
    }
}

struct Timer {
    timing: Vec<StageTiming>,
    sample_id: String,
}

impl Timer {
    fn run<T, E: Into<StageError>>(
        &mut self,
        stage: Stage,
        f: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, PipelineError> {
        let start = Instant::now();
        let out = f();
        let seconds = start.elapsed().as_secs_f64();
        match self.timing.iter_mut().find(|t| t.stage == stage) {
            Some(t) => t.seconds += seconds,
            None => self.timing.push(StageTiming { stage, seconds }),
        }
        out.map_err(|e| PipelineError::Stage {
            sample_id: self.sample_id.clone(),
            stage,
            source: e.into(),
        })
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, StageError> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| StageError::Other(format!("cannot load {}: {e}", path.display())))
}

/// Runs every stage for one sample. Given warm caches the result is a pure
/// function of the inputs, timing aside.
pub fn run_sample(
    sample: &RefSample,
    proposals: &ProposalSet,
    backends: &Backends,
    cfg: &PipelineConfig,
    config_digest: &str,
) -> Result<SampleResult, PipelineError> {
    let mut t = Timer {
        timing: Vec::new(),
        sample_id: sample.sample_id.clone(),
    };
    let weights = cfg.weights();

    let image = t.run(Stage::LoadImage, || {
        let img = load_rgb(&sample.image_path)?;
        let dims = (img.width(), img.height());
        if proposals.is_empty() {
            return Err(StageError::Dataset(DatasetError::EmptyProposalSet {
                image_id: proposals.image_id.clone(),
            }));
        }
        if proposals.dims() != dims {
            return Err(StageError::Dataset(DatasetError::DimMismatch {
                what: format!("proposals of image {}", proposals.image_id),
                image: dims,
                mask: proposals.dims(),
            }));
        }
        Ok(ImageRef::new(sample.image_id.clone(), Arc::new(img)))
    })?;

    let (p_att, p_sur) = t.run(Stage::BuildPrompts, || -> Result<_, PromptError> {
        Ok((
            build_prompt(PromptKind::Attribute, &sample.expression)?,
            build_prompt(PromptKind::Surrounding, &sample.expression)?,
        ))
    })?;
    let t_att = t.run(Stage::DescribeAttribute, || backends.mllm.generate(&image, &p_att))?;
    let t_sur = t.run(Stage::DescribeSurrounding, || backends.mllm.generate(&image, &p_sur))?;
    let bundle = t.run(Stage::ParseDescriptions, || {
        Ok::<_, StageError>(DescriptionBundle::from_replies(&sample.expression, &t_att, &t_sur))
    })?;
    let candidates = t.run(Stage::ExtractNounPhrases, || backends.nouns.extract(&bundle.t_sur))?;
    let (f_van, f_att) = t.run(Stage::EncodeText, || -> Result<_, BackendError> {
        Ok((
            backends.text.encode_text(&sample.expression)?,
            backends.text.encode_text(&bundle.t_att)?,
        ))
    })?;
    let negatives = t.run(Stage::FilterNegatives, || {
        filter_negatives(
            &candidates,
            &bundle.object_phrase,
            &sample.expression,
            cfg.tau,
            backends.text.as_ref(),
        )
    })?;

    let gt = t.run(Stage::LoadImage, || rle_decode(&sample.gt_mask))?;
    let mut breakdowns = Vec::with_capacity(proposals.len());
    let mut overlaps = Vec::with_capacity(proposals.len());
    for (idx, p) in proposals.proposals.iter().enumerate() {
        let (mb, mc, overlap) = t.run(Stage::RenderInstances, || -> Result<_, MaskError> {
            let mask = rle_decode(&p.mask)?;
            let overlap = mask.overlap_counts(&gt)?;
            Ok((
                render(Strategy::MaskBlur, &image.pixels, &mask, &cfg.render)?,
                render(Strategy::MaskCrop, &image.pixels, &mask, &cfg.render)?,
                overlap,
            ))
        })?;
        let (f_mb, f_mc) = t.run(Stage::EncodeInstances, || -> Result<_, BackendError> {
            Ok((backends.image.encode_image(&mb)?, backends.image.encode_image(&mc)?))
        })?;
        let b = t.run(Stage::Score, || -> Result<_, ScoringError> {
            let f_i = fuse_visual(&f_mb, &f_mc, cfg.normalize_first)?;
            Ok(raw_scores(&f_i, &f_att, &f_van, &negatives)?.fuse(idx, weights))
        })?;
        breakdowns.push(b);
        overlaps.push(overlap);
    }
    let selected = t.run(Stage::Select, || select_mask(&breakdowns))?;
    let (intersection, union) = overlaps[selected];
    let chosen = &proposals.proposals[selected];

    Ok(SampleResult {
        v: RESULT_VERSION,
        sample_id: sample.sample_id.clone(),
        image_id: sample.image_id.clone(),
        image_path: sample.image_path.clone(),
        config_digest: config_digest.to_string(),
        weights,
        selected_index: selected,
        selected_proposal_id: chosen.proposal_id.clone(),
        selected_proposal: chosen.mask.clone(),
        gt_mask: sample.gt_mask.clone(),
        intersection,
        union,
        iou: ratio_or_one(intersection, union),
        breakdowns,
        proposal_overlaps: overlaps,
        negatives: negatives.phrases().to_vec(),
        description_bundle: bundle,
        timing: t.timing,
    })
}

/// Contents of `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub v: u32,
    pub config_digest: String,
    pub config: PipelineConfig,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub v: u32,
    pub config_digest: String,
    pub weights: FusionWeights,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub failed: Vec<String>,
    pub skipped_records: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip bad records and failed samples instead of aborting.
    pub lenient: bool,
    /// Process at most this many pending samples, then stop as if
    /// interrupted.
    pub stop_after: Option<usize>,
    /// Set from a signal handler; no new sample starts once it is raised.
    pub cancel: Option<Arc<AtomicBool>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub config_digest: String,
    /// Successful results in manifest order.
    pub results: Vec<SampleResult>,
    pub failed: Vec<(String, String)>,
    pub skipped_records: usize,
    pub resumed: usize,
    pub computed: usize,
    pub backend_calls: u64,
}

pub fn samples_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("samples")
}

pub fn result_path(run_dir: &Path, sample_id: &str) -> PathBuf {
    samples_dir(run_dir).join(format!("{sample_id}.json"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("result serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes `run_config.json`, or checks an existing one against `digest`.
fn claim_run_dir(run_dir: &Path, cfg: &PipelineConfig, digest: &str) -> Result<(), PipelineError> {
    let path = run_dir.join("run_config.json");
    if path.exists() {
        let existing: RunConfigFile = read_json(&path)?;
        if existing.config_digest != digest {
            return Err(PipelineError::ConfigMismatch {
                path,
                expected: digest.to_string(),
                found: existing.config_digest,
            });
        }
        return Ok(());
    }
    write_json(
        &path,
        &RunConfigFile {
            v: RESULT_VERSION,
            config_digest: digest.to_string(),
            config: cfg.resolved(),
        },
    )
}

/// An existing result for this sample under the current config.
fn existing_result(
    run_dir: &Path,
    sample_id: &str,
    digest: &str,
) -> Result<Option<SampleResult>, PipelineError> {
    let path = result_path(run_dir, sample_id);
    if !path.exists() {
        return Ok(None);
    }
    match read_json::<SampleResult>(&path) {
        Ok(r) if r.config_digest == digest && r.sample_id == sample_id => Ok(Some(r)),
        Ok(r) => Err(PipelineError::ConfigMismatch {
            path,
            expected: digest.to_string(),
            found: r.config_digest,
        }),
        Err(e) => {
            log::warn!("{e}; recomputing");
            Ok(None)
        }
    }
}

/// Metrics over results reduced in `sample_id` order.
pub fn metrics_for(results: &[SampleResult]) -> Result<Metrics, EvalError> {
    let mut sorted: Vec<&SampleResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut acc = MetricAccumulator::new();
    for r in sorted {
        acc.add_counts(r.intersection, r.union);
    }
    acc.finalize()
}

/// Scored samples in `sample_id` order, the order every metric uses.
pub fn scored_samples(results: &[SampleResult]) -> Vec<ScoredSample> {
    let mut out: Vec<ScoredSample> = results.iter().map(SampleResult::scored).collect();
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    out
}

pub struct Runner {
    cfg: PipelineConfig,
    digest: String,
    backends: Backends,
}

impl Runner {
    /// Builds the backends from the config. Without a configured cache
    /// directory the cache lives in `default_cache`.
    pub fn new(cfg: PipelineConfig, default_cache: &Path) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let backends = cfg.build_backends(default_cache)?;
        Self::with_backends(cfg, backends)
    }

    pub fn with_backends(cfg: PipelineConfig, backends: Backends) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let digest = cfg.digest()?;
        Ok(Self { cfg, digest, backends })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    fn process(&self, sample: &RefSample, proposals_dir: &Path, run_dir: &Path) -> Result<SampleResult, PipelineError> {
        let proposals = load_proposals(proposals_dir, &sample.image_id).map_err(|e| {
            PipelineError::Stage {
                sample_id: sample.sample_id.clone(),
                stage: Stage::LoadProposals,
                source: e.into(),
            }
        })?;
        let result = run_sample(sample, &proposals, &self.backends, &self.cfg, &self.digest)?;
        write_json(&run_dir.join("scores").join(format!("{}.json", sample.sample_id)), &result.score_dump())?;
        write_json(&result_path(run_dir, &sample.sample_id), &result)?;
        Ok(result)
    }

    /// Runs every sample of the manifest, resuming from `run_dir`, and
    /// writes `metrics.json` once all samples have results.
    pub fn run_split(
        &self,
        manifest: &Path,
        proposals_dir: &Path,
        run_dir: &Path,
        opts: &RunOptions,
    ) -> Result<RunOutcome, PipelineError> {
        let calls_before = self.backends.calls().total();
        let dataset = load_dataset(manifest, opts.lenient)?;
        fs::create_dir_all(samples_dir(run_dir)).map_err(io_err(run_dir))?;
        claim_run_dir(run_dir, &self.cfg, &self.digest)?;

        let total = dataset.samples.len();
        let mut slots: Vec<Option<SampleResult>> = Vec::with_capacity(total);
        for s in &dataset.samples {
            slots.push(existing_result(run_dir, &s.sample_id, &self.digest)?);
        }
        let resumed = slots.iter().filter(|s| s.is_some()).count();
        let mut pending: Vec<usize> = (0..total).filter(|&i| slots[i].is_none()).collect();
        let truncated = matches!(opts.stop_after, Some(k) if k < pending.len());
        if let Some(k) = opts.stop_after {
            pending.truncate(k);
        }
        log::info!(
            "{total} samples: {resumed} already done, {} to compute with {} workers",
            pending.len(),
            self.cfg.worker_limit
        );

        let abort = AtomicBool::new(false);
        let done = AtomicUsize::new(0);
        let cancelled = || opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.worker_limit)
            .build()
            .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?;
        let outcomes: Vec<Option<Result<SampleResult, PipelineError>>> = pool.install(|| {
            pending
                .par_iter()
                .map(|&i| {
                    if abort.load(Ordering::SeqCst) || cancelled() {
                        return None;
                    }
                    let sample = &dataset.samples[i];
                    let r = self.process(sample, proposals_dir, run_dir);
                    match &r {
                        Ok(_) => {
                            let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                            log::debug!("{} done ({n}/{})", sample.sample_id, pending.len());
                        }
                        Err(e) => {
                            log::error!("{e}");
                            if !opts.lenient {
                                abort.store(true, Ordering::SeqCst);
                            }
                        }
                    }
                    Some(r)
                })
                .collect()
        });

        let mut failed = Vec::new();
        let mut first_error = None;
        let mut unfinished = 0;
        for (&i, outcome) in pending.iter().zip(outcomes) {
            match outcome {
                Some(Ok(r)) => slots[i] = Some(r),
                Some(Err(e)) => {
                    failed.push((dataset.samples[i].sample_id.clone(), e.to_string()));
                    if first_error.is_none() {
                        first_error = Some(e);
                    }
                }
                None => unfinished += 1,
            }
        }
        let computed = done.load(Ordering::SeqCst);
        if let Some(e) = first_error.filter(|_| !opts.lenient) {
            return Err(e);
        }
        if truncated || unfinished > 0 || cancelled() {
            return Err(PipelineError::Interrupted {
                completed: slots.iter().filter(|s| s.is_some()).count(),
                total,
            });
        }

        let results: Vec<SampleResult> = slots.into_iter().flatten().collect();
        let metrics = metrics_for(&results)?;
        write_json(
            &run_dir.join("metrics.json"),
            &MetricsFile {
                v: RESULT_VERSION,
                config_digest: self.digest.clone(),
                weights: self.cfg.weights(),
                metrics,
                failed: failed.iter().map(|(id, _)| id.clone()).collect(),
                skipped_records: dataset.skipped.len(),
            },
        )?;
        Ok(RunOutcome {
            metrics,
            config_digest: self.digest.clone(),
            results,
            failed,
            skipped_records: dataset.skipped.len(),
            resumed,
            computed,
            backend_calls: self.backends.calls().total() - calls_before,
        })
    }
}

/// A finished or partial run read back from disk.
#[derive(Debug)]
pub struct StoredRun {
    pub config: RunConfigFile,
    /// Sorted by `sample_id`.
    pub results: Vec<SampleResult>,
}

pub fn load_run(run_dir: &Path) -> Result<StoredRun, PipelineError> {
    let config: RunConfigFile = read_json(&run_dir.join("run_config.json"))?;
    let dir = samples_dir(run_dir);
    let mut results = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let r: SampleResult = read_json(&path)?;
        if r.config_digest != config.config_digest {
            return Err(PipelineError::ConfigMismatch {
                path,
                expected: config.config_digest.clone(),
                found: r.config_digest,
            });
        }
        results.push(r);
    }
    results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(StoredRun { config, results })
}

pub fn load_sample_result(run_dir: &Path, sample_id: &str) -> Result<SampleResult, PipelineError> {
    let path = result_path(run_dir, sample_id);
    if !crate::dataset::is_safe_id(sample_id) || !path.is_file() {
        return Err(PipelineError::NotFound(sample_id.to_string()));
    }
    read_json(&path)
}
