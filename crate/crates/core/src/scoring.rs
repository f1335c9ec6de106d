//! Visual feature fusion, negative-phrase filtering, the three matching
//! scores, their linear fusion and argmax selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Embedding, TextEncoder};

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("fused visual feature is the zero vector")]
    DegenerateSum,
    #[error("no score breakdowns to select from")]
    EmptyInput,
    #[error("similarity threshold {0} outside [-1, 1]")]
    InvalidThreshold(f64),
    #[error("fusion weights must be finite and non-negative, got alpha={alpha} beta={beta}")]
    InvalidWeights { alpha: f64, beta: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<(), ScoringError> {
    if a.dim() != b.dim() {
        return Err(ScoringError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, ScoringError> {
    check_dims(a, b)?;
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok((dot / (a.norm() * b.norm())).clamp(-1.0, 1.0))
}

/// Merges the mask-and-blur and mask-and-crop features into one instance
/// feature. With `normalize_first` each input is scaled to unit length
/// before the sum.
pub fn fuse_visual(
    f_mb: &Embedding,
    f_mc: &Embedding,
    normalize_first: bool,
) -> Result<Embedding, ScoringError> {
    check_dims(f_mb, f_mc)?;
    let (sa, sb) = if normalize_first {
        (1.0 / f_mb.norm(), 1.0 / f_mc.norm())
    } else {
        (1.0, 1.0)
    };
    let sum: Vec<f64> = f_mb
        .values()
        .iter()
        .zip(f_mc.values())
        .map(|(a, b)| a * sa + b * sb)
        .collect();
    // antipodal inputs cancel up to rounding
    let scale = f_mb.norm() * sa + f_mc.norm() * sb;
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= DEGENERATE_RELATIVE_NORM * scale {
        return Err(ScoringError::DegenerateSum);
    }
    Embedding::new(sum).map_err(|_| ScoringError::DegenerateSum)
}

const DEGENERATE_RELATIVE_NORM: f64 = 1e-12;

/// Negative phrases and their text features, kept parallel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeSet {
    phrases: Vec<String>,
    embeddings: Vec<Embedding>,
}

impl NegativeSet {
    pub fn new(phrases: Vec<String>, embeddings: Vec<Embedding>) -> Self {
        assert_eq!(phrases.len(), embeddings.len(), "negative set lists must be parallel");
        Self { phrases, embeddings }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// Keeps the candidate phrases that are semantically far from the referent
/// (`cosine < tau`) and not already mentioned in the expression.
pub fn filter_negatives(
    candidates: &[String],
    object_phrase: &str,
    expression: &str,
    tau: f64,
    encoder: &dyn TextEncoder,
) -> Result<NegativeSet, ScoringError> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(ScoringError::InvalidThreshold(tau));
    }
    if candidates.is_empty() {
        return Ok(NegativeSet::empty());
    }
    let referent = encoder.encode_text(object_phrase)?;
    let expression_lc = expression.to_lowercase();
    let mut phrases = Vec::new();
    let mut embeddings = Vec::new();
    for c in candidates {
        if expression_lc.contains(&c.to_lowercase()) {
            continue;
        }
        let e = encoder.encode_text(c)?;
        if cosine(&e, &referent)? < tau {
            phrases.push(c.clone());
            embeddings.push(e);
        }
    }
    Ok(NegativeSet::new(phrases, embeddings))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl FusionWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, ScoringError> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if ok(self.alpha) && ok(self.beta) {
            Ok(())
        } else {
            Err(ScoringError::InvalidWeights {
                alpha: self.alpha,
                beta: self.beta,
            })
        }
    }
}

/// The three weight-independent scores of one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub s_van: f64,
    pub s_att: f64,
    pub s_sur: f64,
}

impl RawScores {
    pub fn fuse(&self, proposal_index: usize, w: FusionWeights) -> ScoreBreakdown {
        let s_total = self.s_van + w.alpha * self.s_att + w.beta * self.s_sur;
        let bound = 1.0 + w.alpha + w.beta;
        debug_assert!(
            (-bound - 1e-12..=bound + 1e-12).contains(&s_total),
            "fused score {s_total} outside +-{bound}"
        );
        ScoreBreakdown {
            proposal_index,
            s_van: self.s_van,
            s_att: self.s_att,
            s_sur: self.s_sur,
            s_total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub proposal_index: usize,
    pub s_van: f64,
    pub s_att: f64,
    pub s_sur: f64,
    pub s_total: f64,
}

impl ScoreBreakdown {
    pub fn raw(&self) -> RawScores {
        RawScores {
            s_van: self.s_van,
            s_att: self.s_att,
            s_sur: self.s_sur,
        }
    }
}

/// Scores one instance feature against the expression, the attribute
/// description, and the negative phrases. An empty negative set
/// contributes nothing.
pub fn raw_scores(
    f_i: &Embedding,
    f_att: &Embedding,
    f_van: &Embedding,
    negs: &NegativeSet,
) -> Result<RawScores, ScoringError> {
    let s_att = cosine(f_i, f_att)?;
    let s_van = cosine(f_i, f_van)?;
    let s_sur = if negs.is_empty() {
        0.0
    } else {
        let mut sum = 0.0;
        for n in negs.embeddings() {
            sum += cosine(f_i, n)?;
        }
        -sum / negs.len() as f64
    };
    Ok(RawScores { s_van, s_att, s_sur })
}

pub fn score_proposal(
    proposal_index: usize,
    f_i: &Embedding,
    f_att: &Embedding,
    f_van: &Embedding,
    negs: &NegativeSet,
    w: FusionWeights,
) -> Result<ScoreBreakdown, ScoringError> {
    Ok(raw_scores(f_i, f_att, f_van, negs)?.fuse(proposal_index, w))
}

/// Index of the highest total; ties go to the lowest proposal index.
pub fn select_mask(breakdowns: &[ScoreBreakdown]) -> Result<usize, ScoringError> {
    breakdowns
        .iter()
        .fold(None::<&ScoreBreakdown>, |best, b| match best {
            Some(cur)
                if cur.s_total > b.s_total
                    || (cur.s_total == b.s_total && cur.proposal_index <= b.proposal_index) =>
            {
                Some(cur)
            }
            _ => Some(b),
        })
        .map(|b| b.proposal_index)
        .ok_or(ScoringError::EmptyInput)
}

/// Re-fuses cached raw scores and selects.
pub fn select_with_weights(raw: &[RawScores], w: FusionWeights) -> Result<usize, ScoringError> {
    let fused: Vec<_> = raw.iter().enumerate().map(|(i, r)| r.fuse(i, w)).collect();
    select_mask(&fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::stub::PlantedTextEncoder;
    use std::collections::HashMap;

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = e(&[0.3, -1.2, 2.0]);
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let doubled = e(&[0.6, -2.4, 4.0]);
        assert!((cosine(&a, &doubled).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine(&a, &e(&[1.0])),
            Err(ScoringError::DimensionMismatch(3, 1))
        ));
    }

    #[test]
    fn cosine_is_clamped() {
        let a = e(&[0.1, 0.1, 0.1]);
        let c = cosine(&a, &a).unwrap();
        assert!(c <= 1.0);
    }

    #[test]
    fn fuse_examples() {
        let u = e(&[0.6, 0.8]);
        let two_u = fuse_visual(&u, &u, true).unwrap();
        assert!((two_u.values()[0] - 1.2).abs() < 1e-15);
        assert!((two_u.values()[1] - 1.6).abs() < 1e-15);
        let raw = fuse_visual(&e(&[1.0, 0.0]), &e(&[0.0, 1.0]), false).unwrap();
        assert_eq!(raw.values(), &[1.0, 1.0]);
        assert!(matches!(
            fuse_visual(&e(&[1.0, -2.0]), &e(&[-1.0, 2.0]), false),
            Err(ScoringError::DegenerateSum)
        ));
        assert!(matches!(
            fuse_visual(&e(&[1.0, -2.0]), &e(&[-3.0, 6.0]), true),
            Err(ScoringError::DegenerateSum)
        ));
    }

    #[test]
    fn normalized_fusion_equalizes_norms() {
        let big = e(&[100.0, 0.0]);
        let small = e(&[0.0, 1.0]);
        let fused = fuse_visual(&big, &small, true).unwrap();
        assert_eq!(fused.values(), &[1.0, 1.0]);
    }

    fn planted(entries: &[(&str, Vec<f64>)]) -> PlantedTextEncoder {
        let table: HashMap<String, Embedding> = entries
            .iter()
            .map(|(k, v)| (k.to_string(), e(v)))
            .collect();
        PlantedTextEncoder::from_table(table, 2, 7)
    }

    #[test]
    fn filter_drops_referent_itself() {
        let enc = planted(&[("man", vec![1.0, 0.0])]);
        let negs = filter_negatives(&["man".into()], "man", "the guy", 1.0, &enc).unwrap();
        assert!(negs.is_empty());
        let negs = filter_negatives(&[], "man", "the guy", 0.85, &enc).unwrap();
        assert!(negs.is_empty());
    }

    #[test]
    fn filter_keeps_far_phrase() {
        // cos(lamp, man) = 0.1
        let lamp = vec![0.1, (1.0f64 - 0.01).sqrt()];
        let enc = planted(&[("man", vec![1.0, 0.0]), ("lamp", lamp.clone()), ("guy", vec![0.95, 0.3122498999])]);
        let negs = filter_negatives(
            &["lamp".into(), "guy".into()],
            "man",
            "man near window",
            0.85,
            &enc,
        )
        .unwrap();
        assert_eq!(negs.phrases(), &["lamp".to_string()]);
        assert_eq!(negs.embeddings()[0].values(), lamp.as_slice());
    }

    #[test]
    fn filter_skips_phrases_in_expression() {
        let enc = planted(&[("man", vec![1.0, 0.0]), ("Window", vec![0.0, 1.0])]);
        let negs = filter_negatives(&["Window".into()], "man", "man near window", 0.85, &enc).unwrap();
        assert!(negs.is_empty());
    }

    #[test]
    fn filter_rejects_bad_tau() {
        let enc = planted(&[]);
        assert!(matches!(
            filter_negatives(&[], "x", "y", 1.5, &enc),
            Err(ScoringError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn score_examples() {
        // unit visual feature with s_van = 0.5 and s_att = 0.4
        let f_i = e(&[0.5, 0.4, (1.0f64 - 0.25 - 0.16).sqrt()]);
        let f_van = e(&[1.0, 0.0, 0.0]);
        let f_att = e(&[0.0, 1.0, 0.0]);
        let w = FusionWeights::new(0.5, 1.0).unwrap();
        let b = score_proposal(0, &f_i, &f_att, &f_van, &NegativeSet::empty(), w).unwrap();
        assert!((b.s_van - 0.5).abs() < 1e-15);
        assert!((b.s_att - 0.4).abs() < 1e-15);
        assert_eq!(b.s_sur, 0.0);
        assert!((b.s_total - 0.70).abs() < 1e-12);

        let negs = NegativeSet::new(vec!["self".into()], vec![f_i.clone()]);
        let b = score_proposal(0, &f_i, &f_att, &f_van, &negs, w).unwrap();
        assert!((b.s_sur + 1.0).abs() < 1e-15);

        let zero = FusionWeights::new(0.0, 0.0).unwrap();
        let b = score_proposal(3, &f_i, &f_att, &f_van, &negs, zero).unwrap();
        assert_eq!(b.s_total, b.s_van);
        assert_eq!(b.proposal_index, 3);
    }

    #[test]
    fn weights_are_validated() {
        assert!(FusionWeights::new(-0.1, 1.0).is_err());
        assert!(FusionWeights::new(0.1, f64::NAN).is_err());
        assert!(FusionWeights::new(0.0, 0.0).is_ok());
    }

    fn totals(ts: &[f64]) -> Vec<ScoreBreakdown> {
        ts.iter()
            .enumerate()
            .map(|(i, &t)| ScoreBreakdown {
                proposal_index: i,
                s_van: 0.0,
                s_att: 0.0,
                s_sur: 0.0,
                s_total: t,
            })
            .collect()
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_mask(&totals(&[0.2])).unwrap(), 0);
        assert_eq!(select_mask(&totals(&[0.1, 0.9, 0.3])).unwrap(), 1);
        assert_eq!(select_mask(&totals(&[0.5, 0.5])).unwrap(), 0);
        assert!(matches!(select_mask(&[]), Err(ScoringError::EmptyInput)));
        // lowest index wins regardless of slice order
        let mut rev = totals(&[0.5, 0.5, 0.1]);
        rev.reverse();
        assert_eq!(select_mask(&rev).unwrap(), 0);
    }
}
