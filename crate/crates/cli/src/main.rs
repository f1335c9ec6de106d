mod convert;
mod font;
mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use refseg_core::backends::cache::DiskCache;
use refseg_core::dataset::Split;
use refseg_core::evaluation::{ablation_csv, run_ablation, run_sweep, sweep_csv, Metrics};
use refseg_core::masks::rle_decode;
use refseg_core::pipeline::{
    load_run, load_sample_result, load_rgb, metrics_for, scored_samples, write_atomic, DatasetTag,
    PipelineConfig, PipelineError, RunOptions, Runner, StoredRun,
};
use refseg_core::prompts::{build_prompt, PromptKind};
use refseg_core::scoring::FusionWeights;

const CACHE_ENV: &str = "REFSEG_CACHE_DIR";
const DEFAULT_CACHE: &str = "refseg-cache";

#[derive(Parser)]
#[command(name = "refseg", version, about = "Zero-shot referring segmentation by proposal re-ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every sample of a split and write per-sample results and metrics.
    Run(RunCmd),
    /// Recompute oIoU and mIoU from a run directory.
    Eval(EvalCmd),
    /// Evaluate the four description-component combinations.
    Ablate(AblateCmd),
    /// Evaluate a grid of fusion weights.
    Sweep(SweepCmd),
    /// Inspect the description prompts.
    #[command(subcommand)]
    Prompts(PromptsCmd),
    /// Inspect or prune the backend response cache.
    #[command(subcommand)]
    Cache(CacheCmd),
    /// Draw the selected mask, ground truth and descriptions for one sample.
    Visualize(VisualizeCmd),
    /// Build a manifest from a COCO-style referring-expression file.
    ConvertDataset(ConvertCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum TagArg {
    #[value(name = "refcoco")]
    RefCoco,
    #[value(name = "refcoco+")]
    RefCocoPlus,
    #[value(name = "refcocog")]
    RefCocoG,
}

impl From<TagArg> for DatasetTag {
    fn from(t: TagArg) -> Self {
        match t {
            TagArg::RefCoco => DatasetTag::RefCoco,
            TagArg::RefCocoPlus => DatasetTag::RefCocoPlus,
            TagArg::RefCocoG => DatasetTag::RefCocoG,
        }
    }
}

/// Flags that override values from `--config`.
#[derive(Args, Clone)]
struct Overrides {
    /// Pipeline configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset family, which picks the default attribute weight.
    #[arg(long, value_enum)]
    dataset: Option<TagArg>,
    #[arg(long, value_parser = parse_weight)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_weight)]
    beta: Option<f64>,
    /// Negative-filter similarity threshold.
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    /// Concurrent samples.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    workers: Option<u64>,
    /// Backend cache directory (default: $REFSEG_CACHE_DIR, then the config, then ./refseg-cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Record failing samples and continue instead of aborting.
    #[arg(long)]
    lenient: bool,
}

#[derive(Args)]
struct RunCmd {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of per-image proposal files.
    #[arg(long)]
    proposals: PathBuf,
    /// Run directory; an existing run with the same configuration is resumed.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalCmd {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

/// A stored run, optionally completed first from a manifest.
#[derive(Args)]
struct Source {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Run or resume the pipeline on this manifest before evaluating.
    #[arg(long, requires = "proposals")]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    proposals: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    source: Source,
    /// CSV destination (default: <run>/ablation.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    #[command(flatten)]
    source: Source,
    /// Comma-separated attribute weights.
    #[arg(long, value_parser = parse_list, required_unless_present = "default_grid", requires = "betas")]
    alphas: Option<WeightList>,
    /// Comma-separated surrounding weights.
    #[arg(long, value_parser = parse_list, required_unless_present = "default_grid", requires = "alphas")]
    betas: Option<WeightList>,
    /// alpha in 0..=1 step 0.1 and beta in 0..=2 step 0.25.
    #[arg(long, conflicts_with_all = ["alphas", "betas"])]
    default_grid: bool,
    /// CSV destination (default: <run>/sweep.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PromptsCmd {
    /// Print the prompts sent for an expression, or the raw templates.
    Show {
        #[arg(long)]
        expression: Option<String>,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Attribute,
    Surrounding,
}

#[derive(Subcommand)]
enum CacheCmd {
    /// Entry counts and sizes per backend kind.
    Stats {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Remove temp files, corrupt entries and, with --max-age-days, old entries.
    Gc {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        max_age_days: Option<u64>,
    },
}

#[derive(Args)]
struct VisualizeCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    sample: String,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertCmd {
    /// COCO-style JSON with images, annotations and refs.
    #[arg(long)]
    input: PathBuf,
    /// Directory holding the images named by `file_name`.
    #[arg(long)]
    images_dir: PathBuf,
    /// Manifest to write.
    #[arg(long)]
    out: PathBuf,
    /// Keep only this split (val, testA, testB, val_u, test_u, test_g).
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

fn parse_weight(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("{s:?} is not a number"))?;
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("{s} must be finite and non-negative"))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct WeightList(Vec<f64>);

fn parse_list(s: &str) -> Result<WeightList, String> {
    s.split(',')
        .map(|item| {
            if item.trim().is_empty() {
                Err(format!("empty entry in {s:?}"))
            } else {
                parse_weight(item)
            }
        })
        .collect::<Result<_, _>>()
        .map(WeightList)
}

fn parse_split(s: &str) -> Result<Split, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown split {s:?}"))
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other.into()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json value serializes"));
}

fn cache_root(flag: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE))
}

fn effective_config(o: &Overrides) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &o.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(t) = o.dataset {
        cfg.dataset_tag = t.into();
    }
    if o.alpha.is_some() || o.beta.is_some() {
        let base = cfg.weights();
        cfg.weights = Some(FusionWeights {
            alpha: o.alpha.unwrap_or(base.alpha),
            beta: o.beta.unwrap_or(base.beta),
        });
    }
    if let Some(t) = o.tau {
        cfg.tau = t;
    }
    if let Some(w) = o.workers {
        cfg.worker_limit = w as usize;
    }
    cfg.cache_dir = Some(cache_root(o.cache_dir.as_deref(), cfg.cache_dir.as_deref()));
    cfg.validate()?;
    Ok(cfg)
}

fn require_exists(p: &Path, what: &str) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{what} {} does not exist", p.display())))
    }
}

fn cancel_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if f.swap(true, Ordering::SeqCst) {
            std::process::exit(130);
        }
        eprintln!("interrupt received; finishing in-flight samples");
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    flag
}

fn execute(
    manifest: &Path,
    proposals: &Path,
    run_dir: &Path,
    o: &Overrides,
) -> Result<refseg_core::pipeline::RunOutcome, Failure> {
    require_exists(manifest, "manifest")?;
    require_exists(proposals, "proposal directory")?;
    let cfg = effective_config(o)?;
    let default_cache = cfg.cache_dir.clone().expect("set by effective_config");
    let runner = Runner::new(cfg, &default_cache)?;
    let opts = RunOptions {
        lenient: o.lenient,
        stop_after: None,
        cancel: Some(cancel_flag()),
    };
    let outcome = runner.run_split(manifest, proposals, run_dir, &opts)?;
    log::info!(
        "{} resumed, {} computed, {} backend calls",
        outcome.resumed,
        outcome.computed,
        outcome.backend_calls
    );
    for (id, reason) in &outcome.failed {
        eprintln!("failed {id}: {reason}");
    }
    Ok(outcome)
}

fn metrics_json(m: &Metrics, digest: &str, failed: Vec<String>) -> serde_json::Value {
    json!({"oIoU": m.oiou, "mIoU": m.miou, "n": m.n, "config_digest": digest, "failed": failed})
}

fn cmd_run(c: RunCmd) -> CmdResult {
    let out = execute(&c.manifest, &c.proposals, &c.out, &c.overrides)?;
    let failed = out.failed.into_iter().map(|(id, _)| id).collect();
    print_json(&metrics_json(&out.metrics, &out.config_digest, failed));
    Ok(())
}

fn cmd_eval(c: EvalCmd) -> CmdResult {
    require_exists(&c.run, "run directory")?;
    let stored = load_run(&c.run)?;
    let metrics = metrics_for(&stored.results).map_err(PipelineError::from)?;
    print_json(&metrics_json(&metrics, &stored.config.config_digest, Vec::new()));
    Ok(())
}

fn load_source(s: &Source) -> Result<StoredRun, Failure> {
    if let (Some(m), Some(p)) = (&s.manifest, &s.proposals) {
        execute(m, p, &s.run, &s.overrides)?;
    } else {
        require_exists(&s.run, "run directory")?;
    }
    Ok(load_run(&s.run)?)
}

fn base_weights(s: &Source, stored: &StoredRun) -> FusionWeights {
    let w = stored.config.config.weights();
    FusionWeights {
        alpha: s.overrides.alpha.unwrap_or(w.alpha),
        beta: s.overrides.beta.unwrap_or(w.beta),
    }
}

fn cmd_ablate(c: AblateCmd) -> CmdResult {
    let stored = load_source(&c.source)?;
    let base = if c.source.manifest.is_some() {
        stored.config.config.weights()
    } else {
        base_weights(&c.source, &stored)
    };
    let rows = run_ablation(&scored_samples(&stored.results), base).map_err(PipelineError::from)?;
    let csv = c.csv.unwrap_or_else(|| c.source.run.join("ablation.csv"));
    write_atomic(&csv, ablation_csv(&rows).as_bytes())?;
    for r in &rows {
        print_json(&json!({
            "use_att": r.config.use_att,
            "use_sur": r.config.use_sur,
            "oIoU": r.metrics.oiou,
            "mIoU": r.metrics.miou,
            "n": r.metrics.n,
        }));
    }
    Ok(())
}

fn default_grid() -> (Vec<f64>, Vec<f64>) {
    let alphas = (0..=10).map(|i| f64::from(i) / 10.0).collect();
    let betas = (0..=8).map(|i| f64::from(i) * 0.25).collect();
    (alphas, betas)
}

fn cmd_sweep(c: SweepCmd) -> CmdResult {
    let (alphas, betas) = match (c.alphas, c.betas) {
        (Some(a), Some(b)) if !c.default_grid => (a.0, b.0),
        _ if c.default_grid => default_grid(),
        _ => return Err(Failure::Usage("give --alphas and --betas, or --default-grid".into())),
    };
    let stored = load_source(&c.source)?;
    let grid = run_sweep(&scored_samples(&stored.results), &alphas, &betas).map_err(PipelineError::from)?;
    let csv = c.csv.unwrap_or_else(|| c.source.run.join("sweep.csv"));
    write_atomic(&csv, sweep_csv(&grid).as_bytes())?;
    for (by, (a, b, m)) in [("oIoU", grid.best_by_oiou()), ("mIoU", grid.best_by_miou())] {
        print_json(&json!({"best_by": by, "alpha": a, "beta": b, "oIoU": m.oiou, "mIoU": m.miou, "n": m.n}));
    }
    Ok(())
}

fn cmd_prompts(c: PromptsCmd) -> CmdResult {
    let PromptsCmd::Show { expression, kind } = c;
    let kinds: Vec<PromptKind> = match kind {
        Some(KindArg::Attribute) => vec![PromptKind::Attribute],
        Some(KindArg::Surrounding) => vec![PromptKind::Surrounding],
        None => PromptKind::ALL.to_vec(),
    };
    for (i, k) in kinds.into_iter().enumerate() {
        if i > 0 {
            println!();
        }
        let name = match k {
            PromptKind::Attribute => "attribute",
            PromptKind::Surrounding => "surrounding",
        };
        println!("== {name} ==");
        match &expression {
            Some(e) => {
                let p = build_prompt(k, e).map_err(|e| Failure::Usage(e.to_string()))?;
                println!("{p}");
            }
            None => println!("{}", k.template()),
        }
    }
    Ok(())
}

fn cmd_cache(c: CacheCmd) -> CmdResult {
    match c {
        CacheCmd::Stats { cache_dir } => {
            let cache = DiskCache::open(cache_root(cache_dir.as_deref(), None)).map_err(anyhow::Error::from)?;
            print_json(&json!({"root": cache.root(), "kinds": cache.stats()}));
        }
        CacheCmd::Gc { cache_dir, max_age_days } => {
            let cache = DiskCache::open(cache_root(cache_dir.as_deref(), None)).map_err(anyhow::Error::from)?;
            let age = max_age_days.map(|d| Duration::from_secs(d * 86_400));
            let report = cache.gc(age).map_err(anyhow::Error::from)?;
            print_json(&serde_json::to_value(report).map_err(anyhow::Error::from)?);
        }
    }
    Ok(())
}

fn cmd_visualize(c: VisualizeCmd) -> CmdResult {
    require_exists(&c.run, "run directory")?;
    let r = load_sample_result(&c.run, &c.sample)?;
    let img = load_rgb(&r.image_path)
        .map_err(|e| anyhow!("{}: {e}", r.image_path.display()))?;
    let pred = rle_decode(&r.selected_proposal).map_err(|e| anyhow!("selected mask: {e}"))?;
    let gt = rle_decode(&r.gt_mask).map_err(|e| anyhow!("ground truth: {e}"))?;
    if pred.dims() != img.dimensions() || gt.dims() != img.dimensions() {
        return Err(anyhow!("mask dimensions differ from {}", r.image_path.display()).into());
    }
    let d = &r.description_bundle;
    let lines = [
        format!("T_van: {}", d.t_van),
        format!("T_att: {}", d.t_att),
        format!("T_sur: {}", d.t_sur),
    ];
    let out = overlay::render_overlay(&img, &pred, &gt, &lines);
    if let Some(dir) = c.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.save_with_format(&c.out, image::ImageFormat::Png)
        .with_context(|| format!("writing {}", c.out.display()))?;
    Ok(())
}

fn cmd_convert(c: ConvertCmd) -> CmdResult {
    require_exists(&c.input, "input")?;
    require_exists(&c.images_dir, "image directory")?;
    let rep = convert::convert(&c.input, &c.images_dir, &c.out, c.split)?;
    print_json(&json!({"written": rep.written, "filtered": rep.filtered}));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Prompts(c) => cmd_prompts(c),
        Command::Cache(c) => cmd_cache(c),
        Command::Visualize(c) => cmd_visualize(c),
        Command::ConvertDataset(c) => cmd_convert(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            let _ = Cli::command().print_help();
            eprintln!("\nerror: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
