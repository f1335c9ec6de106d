mod common;

use std::fs;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use common::*;
use refseg_core::backends::stub::PlantedFixture;
use refseg_core::backends::{instance_digest, BackendKind, Embedding};
use refseg_core::dataset::{load_dataset, load_proposals};
use refseg_core::evaluation::{run_ablation, run_sweep, AblationConfig};
use refseg_core::masks::{render, rle_decode, Strategy};
use refseg_core::pipeline::{
    load_run, run_sample, scored_samples, PipelineConfig, PipelineError, RunOptions, Runner,
};
use refseg_core::scoring::FusionWeights;

fn run(cfg: &PipelineConfig, ds_manifest: &std::path::Path, props: &std::path::Path, out: &std::path::Path) -> refseg_core::pipeline::RunOutcome {
    Runner::new(cfg.clone(), out)
        .unwrap()
        .run_split(ds_manifest, props, out, &RunOptions::default())
        .unwrap()
}

#[test]
fn planted_targets_are_selected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_planted(&dir.path().join("data"));
    let cfg = planted_config(&ds, &dir.path().join("cache"));
    let out = run(&cfg, &ds.manifest, &ds.proposals_dir, &dir.path().join("run"));
    let picks: Vec<_> = out.results.iter().map(|r| r.selected_index).collect();
    assert_eq!(picks, ds.targets);
    assert_eq!((out.metrics.oiou, out.metrics.miou), (1.0, 1.0));
    for r in &out.results {
        assert_eq!(r.negatives, vec!["lamp".to_string()]);
        assert_eq!(r.description_bundle.object_phrase, "man");
    }

    let rows = run_ablation(&scored_samples(&out.results), cfg.weights()).unwrap();
    let correct = |row: usize| (rows[row].metrics.miou * 10.0).round() as usize;
    // expression only, +surrounding, +attribute, all three
    assert_eq!([correct(0), correct(1), correct(2), correct(3)], [2, 5, 5, 10]);
    assert_eq!(rows[3].metrics, out.metrics);
}

#[test]
fn attribute_axis_proposal_wins() {
    // proposal 2 looks exactly like the attribute text; the others are
    // orthogonal to every text axis
    let dir = tempfile::tempdir().unwrap();
    let ds = build_planted(&dir.path().join("data"));
    let mut fx = PlantedFixture::load(&ds.fixture).unwrap();
    let sample = load_dataset(&ds.manifest, false).unwrap().samples.remove(8);
    let props = load_proposals(&ds.proposals_dir, &sample.image_id).unwrap();
    assert_eq!(props.len(), 3);
    let img = image::open(&sample.image_path).unwrap().to_rgb8();
    for (j, p) in props.proposals.iter().enumerate() {
        let mut v = vec![0.0; DIM];
        v[if j == 2 { 1 } else { 6 + j }] = 1.0;
        for s in [Strategy::MaskBlur, Strategy::MaskCrop] {
            let inst = render(s, &img, &rle_decode(&p.mask).unwrap(), &render_config()).unwrap();
            fx.image.insert(instance_digest(&inst), Embedding::new(v.clone()).unwrap());
        }
    }
    fs::write(&ds.fixture, serde_json::to_vec(&fx).unwrap()).unwrap();
    let cfg = planted_config(&ds, &dir.path().join("cache"));
    let backends = cfg.build_backends(dir.path()).unwrap();
    let r = run_sample(&sample, &props, &backends, &cfg, "x").unwrap();
    assert_eq!(r.selected_index, 2);
    assert_eq!(r.breakdowns[2].s_att, 1.0);
    assert_eq!(r.breakdowns[0].s_att, 0.0);
}

#[test]
fn rerun_uses_stored_results() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 6, 7);
    let cfg = stub_config(&dir.path().join("cache"));
    let out_dir = dir.path().join("run");
    let first = run(&cfg, &ds.manifest, &ds.proposals_dir, &out_dir);
    assert_eq!(first.computed, 6);
    assert!(first.backend_calls > 0);
    let metrics_bytes = fs::read(out_dir.join("metrics.json")).unwrap();
    let second = run(&cfg, &ds.manifest, &ds.proposals_dir, &out_dir);
    assert_eq!(second.resumed, 6);
    assert_eq!(second.computed, 0);
    assert_eq!(second.backend_calls, 0);
    assert_eq!(second.metrics, first.metrics);
    assert_eq!(fs::read(out_dir.join("metrics.json")).unwrap(), metrics_bytes);
    assert!(out_dir.join("scores/rand_000.json").is_file());
}

#[test]
fn interrupted_run_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 9, 11);
    let cfg = stub_config(&dir.path().join("cache"));
    let whole = run(&cfg, &ds.manifest, &ds.proposals_dir, &dir.path().join("whole"));

    let part = dir.path().join("part");
    let runner = Runner::new(cfg.clone(), &part).unwrap();
    let opts = RunOptions { stop_after: Some(4), ..Default::default() };
    let err = runner.run_split(&ds.manifest, &ds.proposals_dir, &part, &opts).unwrap_err();
    assert!(matches!(err, PipelineError::Interrupted { completed: 4, total: 9 }));
    assert!(!part.join("metrics.json").exists());
    let resumed = runner
        .run_split(&ds.manifest, &ds.proposals_dir, &part, &RunOptions::default())
        .unwrap();
    assert_eq!((resumed.resumed, resumed.computed), (4, 5));
    assert_eq!(resumed.metrics, whole.metrics);
    for (a, b) in whole.results.iter().zip(&resumed.results) {
        assert_eq!(a.without_timing(), b.without_timing());
    }
}

#[test]
fn cancelled_run_starts_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 3, 2);
    let cfg = stub_config(&dir.path().join("cache"));
    let out = dir.path().join("run");
    let opts = RunOptions {
        cancel: Some(Arc::new(AtomicBool::new(true))),
        ..Default::default()
    };
    let err = Runner::new(cfg, &out)
        .unwrap()
        .run_split(&ds.manifest, &ds.proposals_dir, &out, &opts)
        .unwrap_err();
    assert!(matches!(err, PipelineError::Interrupted { completed: 0, .. }));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 12, 5);
    let mut cfg = stub_config(&dir.path().join("cache"));
    cfg.worker_limit = 1;
    let one = run(&cfg, &ds.manifest, &ds.proposals_dir, &dir.path().join("w1"));
    cfg.worker_limit = 8;
    let eight = run(&cfg, &ds.manifest, &ds.proposals_dir, &dir.path().join("w8"));
    assert_eq!(one.metrics, eight.metrics);
    assert_eq!(selection_bytes(&one.results), selection_bytes(&eight.results));
}

#[test]
fn config_change_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 2, 3);
    let mut cfg = stub_config(&dir.path().join("cache"));
    let out = dir.path().join("run");
    run(&cfg, &ds.manifest, &ds.proposals_dir, &out);
    cfg.tau = 0.5;
    let err = Runner::new(cfg, &out)
        .unwrap()
        .run_split(&ds.manifest, &ds.proposals_dir, &out, &RunOptions::default())
        .unwrap_err();
    assert!(matches!(err, PipelineError::ConfigMismatch { .. }));
}

#[test]
fn foreign_result_file_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 2, 3);
    let cfg = stub_config(&dir.path().join("cache"));
    let a = dir.path().join("a");
    run(&cfg, &ds.manifest, &ds.proposals_dir, &a);
    let mut other = cfg.clone();
    other.tau = 0.2;
    let b = dir.path().join("b");
    run(&other, &ds.manifest, &ds.proposals_dir, &b);
    fs::copy(a.join("samples/rand_000.json"), b.join("samples/rand_000.json")).unwrap();
    assert!(matches!(load_run(&b), Err(PipelineError::ConfigMismatch { .. })));
}

#[test]
fn empty_split_has_no_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    fs::write(&manifest, "").unwrap();
    let out = dir.path().join("run");
    let err = Runner::new(stub_config(&dir.path().join("cache")), &out)
        .unwrap()
        .run_split(&manifest, dir.path(), &out, &RunOptions::default())
        .unwrap_err();
    assert!(matches!(
        err,
        PipelineError::Eval(refseg_core::evaluation::EvalError::EmptyAccumulator)
    ));
}

#[test]
fn missing_proposals_abort_or_skip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_random(&dir.path().join("data"), 4, 9);
    fs::remove_file(ds.proposals_dir.join("r2.json")).unwrap();
    let cfg = stub_config(&dir.path().join("cache"));
    let strict = dir.path().join("strict");
    let err = Runner::new(cfg.clone(), &strict)
        .unwrap()
        .run_split(&ds.manifest, &ds.proposals_dir, &strict, &RunOptions::default())
        .unwrap_err();
    assert!(err.to_string().contains("rand_002"), "{err}");
    assert!(err.to_string().contains("load_proposals"), "{err}");

    let lenient = dir.path().join("lenient");
    let opts = RunOptions { lenient: true, ..Default::default() };
    let out = Runner::new(cfg, &lenient)
        .unwrap()
        .run_split(&ds.manifest, &ds.proposals_dir, &lenient, &opts)
        .unwrap();
    assert_eq!(out.results.len(), 3);
    assert_eq!(out.failed.len(), 1);
    assert_eq!(out.failed[0].0, "rand_002");
}

#[test]
fn stored_run_supports_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let ds = build_planted(&dir.path().join("data"));
    let cfg = planted_config(&ds, &dir.path().join("cache"));
    let out_dir = dir.path().join("run");
    let out = run(&cfg, &ds.manifest, &ds.proposals_dir, &out_dir);
    let stored = load_run(&out_dir).unwrap();
    assert_eq!(stored.results.len(), 10);
    assert_eq!(stored.config.config_digest, out.config_digest);
    assert!(stored.config.config.backends.contains_key(&BackendKind::NpExtractor));
    let grid = run_sweep(&scored_samples(&stored.results), &[0.0, 0.5], &[0.0, 1.0]).unwrap();
    assert_eq!(grid.cells[1][1], out.metrics);
    let rows = run_ablation(&scored_samples(&stored.results), FusionWeights::new(0.5, 1.0).unwrap()).unwrap();
    assert_eq!(rows[0].config, AblationConfig { use_att: false, use_sur: false });
    assert_eq!(grid.cells[0][0], rows[0].metrics);
}
