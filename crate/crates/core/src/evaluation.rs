//! Dataset-level metrics, the score-ablation table and weight sweeps.
//!
//! Pixel counts are accumulated as integers; floating point only enters in
//! the final ratios. Ablations and sweeps never call a backend: they re-fuse
//! the cached per-proposal raw scores of a finished run.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::masks::{ratio_or_one, BinaryMask, MaskError};
use crate::scoring::{select_with_weights, FusionWeights, RawScores, ScoringError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    DimensionMismatch(#[from] MaskError),
    #[error("no samples were evaluated")]
    EmptyAccumulator,
    #[error("sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },
    #[error("sweep grid needs at least one alpha and one beta")]
    EmptyGrid,
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "oIoU")]
    pub oiou: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    total_intersection: u64,
    total_union: u64,
    per_sample_iou: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<(), EvalError> {
        let (i, u) = pred.overlap_counts(gt)?;
        self.add_counts(i, u);
        Ok(())
    }

    /// Adds one sample given its intersection and union pixel counts.
    pub fn add_counts(&mut self, intersection: u64, union: u64) {
        assert!(intersection <= union, "intersection {intersection} exceeds union {union}");
        self.total_intersection += intersection;
        self.total_union += union;
        self.per_sample_iou.push(ratio_or_one(intersection, union));
    }

    pub fn n(&self) -> usize {
        self.per_sample_iou.len()
    }

    pub fn total_intersection(&self) -> u64 {
        self.total_intersection
    }

    pub fn total_union(&self) -> u64 {
        self.total_union
    }

    pub fn per_sample_iou(&self) -> &[f64] {
        &self.per_sample_iou
    }

    pub fn finalize(&self) -> Result<Metrics, EvalError> {
        let n = self.n();
        if n == 0 {
            return Err(EvalError::EmptyAccumulator);
        }
        Ok(Metrics {
            oiou: ratio_or_one(self.total_intersection, self.total_union),
            miou: compensated_sum(&self.per_sample_iou) / n as f64,
            n,
        })
    }
}

/// Everything needed to re-select one sample under new weights: raw scores
/// per proposal and each proposal's overlap with the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub raw: Vec<RawScores>,
    /// `(intersection, union)` of each proposal against the ground truth.
    pub overlaps: Vec<(u64, u64)>,
}

impl ScoredSample {
    fn check(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.raw.is_empty() {
            return Err(bad("no proposals".into()));
        }
        if self.raw.len() != self.overlaps.len() {
            return Err(bad(format!(
                "{} score rows for {} proposals",
                self.raw.len(),
                self.overlaps.len()
            )));
        }
        if self.overlaps.iter().any(|(i, u)| i > u) {
            return Err(bad("intersection exceeds union".into()));
        }
        Ok(())
    }
}

/// Selects a proposal per sample with weights `w` and scores the selection.
/// Samples are reduced in slice order.
pub fn evaluate_weights(
    samples: &[ScoredSample],
    w: FusionWeights,
) -> Result<(Metrics, Vec<usize>), EvalError> {
    w.validate()?;
    let mut acc = MetricAccumulator::new();
    let mut picks = Vec::with_capacity(samples.len());
    for s in samples {
        s.check()?;
        let idx = select_with_weights(&s.raw, w)?;
        let (i, u) = s.overlaps[idx];
        acc.add_counts(i, u);
        picks.push(idx);
    }
    Ok((acc.finalize()?, picks))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_att: bool,
    pub use_sur: bool,
}

impl AblationConfig {
    /// Table order: expression only, +surrounding, +attribute, all three.
    pub const ALL: [AblationConfig; 4] = [
        AblationConfig { use_att: false, use_sur: false },
        AblationConfig { use_att: false, use_sur: true },
        AblationConfig { use_att: true, use_sur: false },
        AblationConfig { use_att: true, use_sur: true },
    ];

    /// Zeroes the weights of the disabled scores.
    pub fn weights(self, base: FusionWeights) -> FusionWeights {
        FusionWeights {
            alpha: if self.use_att { base.alpha } else { 0.0 },
            beta: if self.use_sur { base.beta } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: AblationConfig,
    pub metrics: Metrics,
    pub selections: Vec<usize>,
}

pub fn run_ablation(
    samples: &[ScoredSample],
    base: FusionWeights,
) -> Result<Vec<AblationRow>, EvalError> {
    AblationConfig::ALL
        .iter()
        .map(|&config| {
            let (metrics, selections) = evaluate_weights(samples, config.weights(base))?;
            Ok(AblationRow { config, metrics, selections })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `cells[i][j]` is the result at `(alphas[i], betas[j])`.
    pub cells: Vec<Vec<Metrics>>,
}

impl SweepGrid {
    fn best_by(&self, key: impl Fn(&Metrics) -> f64) -> (f64, f64, Metrics) {
        let mut best = (0, 0);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, m) in row.iter().enumerate() {
                if key(m) > key(&self.cells[best.0][best.1]) {
                    best = (i, j);
                }
            }
        }
        (self.alphas[best.0], self.betas[best.1], self.cells[best.0][best.1])
    }

    /// First cell in row-major order with the highest oIoU.
    pub fn best_by_oiou(&self) -> (f64, f64, Metrics) {
        self.best_by(|m| m.oiou)
    }

    pub fn best_by_miou(&self) -> (f64, f64, Metrics) {
        self.best_by(|m| m.miou)
    }
}

pub fn run_sweep(
    samples: &[ScoredSample],
    alphas: &[f64],
    betas: &[f64],
) -> Result<SweepGrid, EvalError> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let cells = alphas
        .iter()
        .map(|&alpha| {
            betas
                .iter()
                .map(|&beta| evaluate_weights(samples, FusionWeights::new(alpha, beta)?).map(|r| r.0))
                .collect::<Result<Vec<_>, EvalError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        cells,
    })
}

/// `use_att,use_sur,oIoU,mIoU` with shortest round-trip float formatting.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("use_att,use_sur,oIoU,mIoU\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.config.use_att, r.config.use_sur, r.metrics.oiou, r.metrics.miou
        );
    }
    out
}

pub fn sweep_csv(grid: &SweepGrid) -> String {
    let mut out = String::from("alpha,beta,oIoU,mIoU\n");
    for (a, row) in grid.alphas.iter().zip(&grid.cells) {
        for (b, m) in grid.betas.iter().zip(row) {
            let _ = writeln!(out, "{a},{b},{},{}", m.oiou, m.miou);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Mask with the first `k` pixels (row-major) set.
    fn prefix(w: u32, h: u32, k: usize) -> BinaryMask {
        let bits = (0..(w * h) as usize).map(|i| i < k).collect();
        BinaryMask::from_row_major(w, h, bits).unwrap()
    }

    fn range(w: u32, h: u32, lo: usize, hi: usize) -> BinaryMask {
        let bits = (0..(w * h) as usize).map(|i| (lo..hi).contains(&i)).collect();
        BinaryMask::from_row_major(w, h, bits).unwrap()
    }

    #[test]
    fn perfect_single_sample() {
        let mut acc = MetricAccumulator::new();
        let m = prefix(4, 4, 5);
        acc.accumulate(&m, &m).unwrap();
        let r = acc.finalize().unwrap();
        assert_eq!((r.oiou, r.miou, r.n), (1.0, 1.0, 1));
    }

    #[test]
    fn single_sample_metrics_coincide() {
        let mut acc = MetricAccumulator::new();
        acc.accumulate(&range(7, 3, 2, 13), &range(7, 3, 5, 19)).unwrap();
        let r = acc.finalize().unwrap();
        assert_eq!(r.oiou, r.miou);
        assert_eq!(r.oiou, 8.0 / 17.0);
    }

    #[test]
    fn big_and_small_objects() {
        // big: 9000 of 10000 gt pixels predicted; small: 10 of 100
        let mut acc = MetricAccumulator::new();
        acc.accumulate(&prefix(100, 100, 9000), &prefix(100, 100, 10000)).unwrap();
        acc.accumulate(&prefix(10, 10, 10), &prefix(10, 10, 100)).unwrap();
        assert_eq!(acc.total_intersection(), 9010);
        assert_eq!(acc.total_union(), 10100);
        let r = acc.finalize().unwrap();
        assert_eq!(r.miou, 0.5);
        assert_eq!(r.oiou, 9010.0 / 10100.0);
        assert!((r.oiou - 0.8921).abs() < 1e-4);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let mut acc = MetricAccumulator::new();
        for k in [1, 5, 9] {
            acc.accumulate(&prefix(3, 3, 0), &prefix(3, 3, k)).unwrap();
        }
        let r = acc.finalize().unwrap();
        assert_eq!((r.oiou, r.miou), (0.0, 0.0));
    }

    #[test]
    fn both_empty_everywhere_is_perfect() {
        let mut acc = MetricAccumulator::new();
        acc.accumulate(&prefix(2, 2, 0), &prefix(2, 2, 0)).unwrap();
        assert_eq!(acc.finalize().unwrap().oiou, 1.0);
    }

    #[test]
    fn empty_and_mismatched() {
        assert!(matches!(MetricAccumulator::new().finalize(), Err(EvalError::EmptyAccumulator)));
        let mut acc = MetricAccumulator::new();
        assert!(matches!(
            acc.accumulate(&prefix(2, 2, 1), &prefix(2, 3, 1)),
            Err(EvalError::DimensionMismatch(_))
        ));
        assert_eq!(acc.n(), 0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let v = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(compensated_sum(&v), 2.0);
    }

    fn toy_samples() -> Vec<ScoredSample> {
        let r = |s_van, s_att, s_sur| RawScores { s_van, s_att, s_sur };
        vec![
            // attribute decides
            ScoredSample {
                sample_id: "a".into(),
                raw: vec![r(0.6, 0.0, 0.0), r(0.5, 0.6, 0.0)],
                overlaps: vec![(0, 20), (10, 10)],
            },
            // surrounding decides
            ScoredSample {
                sample_id: "b".into(),
                raw: vec![r(0.6, 0.0, -0.5), r(0.5, 0.0, 0.0)],
                overlaps: vec![(0, 8), (4, 4)],
            },
        ]
    }

    #[test]
    fn ablation_rows() {
        let rows = run_ablation(&toy_samples(), FusionWeights::new(0.5, 1.0).unwrap()).unwrap();
        let sel: Vec<_> = rows.iter().map(|r| r.selections.clone()).collect();
        assert_eq!(sel, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(rows[3].metrics.oiou, 1.0);
        assert_eq!(rows[0].metrics.oiou, 0.0);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "use_att,use_sur,oIoU,mIoU");
        assert_eq!(csv.lines().nth(4).unwrap(), "true,true,1,1");
    }

    #[test]
    fn zero_weights_collapse_ablation() {
        let rows = run_ablation(&toy_samples(), FusionWeights::new(0.0, 0.0).unwrap()).unwrap();
        assert!(rows.windows(2).all(|p| p[0].metrics == p[1].metrics));
    }

    #[test]
    fn sweep_shape_and_duplicates() {
        let s = toy_samples();
        let g = run_sweep(&s, &[0.0, 0.5, 0.5], &[1.0]).unwrap();
        assert_eq!(g.cells.len(), 3);
        assert_eq!(g.cells[1], g.cells[2]);
        let plain = evaluate_weights(&s, FusionWeights::new(0.5, 1.0).unwrap()).unwrap().0;
        assert_eq!(g.cells[1][0], plain);
        let (a, b, m) = g.best_by_oiou();
        assert_eq!((a, b, m.oiou), (0.5, 1.0, 1.0));
        let csv = sweep_csv(&g);
        assert_eq!(csv.lines().count(), 4);
        assert!(matches!(run_sweep(&s, &[], &[1.0]), Err(EvalError::EmptyGrid)));
    }

    #[test]
    fn mismatched_sample_rejected() {
        let mut s = toy_samples();
        s[0].overlaps.pop();
        assert!(matches!(
            evaluate_weights(&s, FusionWeights::new(0.5, 1.0).unwrap()),
            Err(EvalError::InvalidSample { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn miou_permutation_invariant(
                counts in prop::collection::vec((0u64..500, 1u64..500), 1..60),
                seed in any::<u64>(),
            ) {
                let mut fwd = MetricAccumulator::new();
                let mut rev = MetricAccumulator::new();
                let pairs: Vec<_> = counts.iter().map(|&(i, u)| (i.min(u), u)).collect();
                for &(i, u) in &pairs { fwd.add_counts(i, u); }
                let mut order: Vec<_> = (0..pairs.len()).collect();
                order.sort_by_key(|k| (*k as u64).wrapping_mul(seed | 1).rotate_left(17));
                for k in order { rev.add_counts(pairs[k].0, pairs[k].1); }
                let (a, b) = (fwd.finalize().unwrap(), rev.finalize().unwrap());
                prop_assert!((a.miou - b.miou).abs() <= 1e-12);
                prop_assert_eq!(a.oiou, b.oiou);
                prop_assert!((0.0..=1.0).contains(&a.oiou) && (0.0..=1.0).contains(&a.miou));
            }
        }
    }
}
