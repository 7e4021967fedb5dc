//! Blocked sign-permutation test between two models' profiles.
//!
//! Each source text is one block. Under the null hypothesis that neither
//! model is systematically better, every block score is equally likely to
//! carry either sign, so the observed sum is compared against all (or a
//! random sample of) sign flips.

use std::collections::HashMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::AnalysisError;
use crate::profiles::AccuracyProfile;

pub const DEFAULT_TAU_GRID: [f64; 15] = [
    0.01, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70,
];

const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestSettings {
    pub alpha_sig: f64,
    /// Largest block count enumerated exactly.
    pub exact_threshold: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for TestSettings {
    fn default() -> Self {
        Self {
            alpha_sig: 0.05,
            exact_threshold: 20,
            resamples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockScores {
    pub f: String,
    pub g: String,
    pub text_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Exact,
    MonteCarlo,
}

impl std::fmt::Display for TestMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TestMethod::Exact => "exact",
            TestMethod::MonteCarlo => "monte_carlo",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub f: String,
    pub g: String,
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub n_resamples: u64,
    pub alpha_sig: f64,
    /// True when the test concludes `f` is larger.
    pub decision: bool,
}

/// Per-text mean of raw-accuracy differences `f - g` over lengths.
pub fn block_scores(pf: &AccuracyProfile, pg: &AccuracyProfile) -> Result<BlockScores, AnalysisError> {
    if !pf.same_layout(pg) || pf.dimension() != pg.dimension() {
        return Err(AnalysisError::Compatibility(format!(
            "{} and {} have different profile layouts",
            pf.model_id, pg.model_id
        )));
    }
    let l = pf.lengths.len();
    let scores = (0..pf.text_ids.len())
        .map(|j| (0..l).map(|k| pf.raw(j, k) - pg.raw(j, k)).sum::<f64>() / l as f64)
        .collect();
    Ok(BlockScores {
        f: pf.model_id.clone(),
        g: pg.model_id.clone(),
        text_ids: pf.text_ids.clone(),
        lengths: pf.lengths.clone(),
        scores,
    })
}

/// Partial sums for each 8-block chunk: entry `b` of chunk `c` is the signed
/// sum over the chunk's blocks, with bit `i` of `b` set meaning `+s`.
fn byte_tables(s: &[f64]) -> Vec<[f64; 256]> {
    s.chunks(8)
        .map(|chunk| {
            let mut t = [0.0; 256];
            for (b, slot) in t.iter_mut().enumerate() {
                *slot = chunk
                    .iter()
                    .enumerate()
                    .map(|(i, v)| if b >> i & 1 == 1 { *v } else { -*v })
                    .sum();
            }
            t
        })
        .collect()
}

#[inline]
fn signed_sum(tables: &[[f64; 256]], words: &[u64]) -> f64 {
    let mut acc = 0.0;
    for (c, t) in tables.iter().enumerate() {
        let byte = (words[c / 8] >> ((c % 8) * 8)) & 0xff;
        acc += t[byte as usize];
    }
    acc
}

fn tie_tolerance(s: &[f64]) -> f64 {
    1e-12 * s.iter().map(|v| v.abs()).sum::<f64>()
}

/// Exact one-sided p-value: the share of all `2^K` sign vectors whose signed
/// sum reaches the observed one.
pub fn exact_p_value(s: &[f64]) -> f64 {
    let k = s.len();
    assert!(k <= 30, "exact enumeration limited to 30 blocks");
    let observed: f64 = s.iter().sum();
    let threshold = observed - tie_tolerance(s);
    let tables = byte_tables(s);
    let total = 1u64 << k;
    let span = total.min(1 << 14);
    let count: u64 = (0..total / span)
        .into_par_iter()
        .map(|block| {
            let start = block * span;
            (start..start + span)
                .filter(|&mask| signed_sum(&tables, &[mask]) >= threshold)
                .count() as u64
        })
        .sum();
    count as f64 / total as f64
}

/// Monte Carlo p-value with the add-one estimator. Resamples are generated in
/// fixed chunks, each with its own ChaCha stream, so the result does not
/// depend on thread scheduling.
pub fn monte_carlo_p_value(s: &[f64], resamples: usize, seed: u64) -> f64 {
    let observed: f64 = s.iter().sum();
    let threshold = observed - tie_tolerance(s);
    let tables = byte_tables(s);
    let n_words = s.len().div_ceil(64).max(1);
    let n_chunks = resamples.div_ceil(MC_CHUNK);
    let count: usize = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let mut words = vec![0u64; n_words];
            let todo = MC_CHUNK.min(resamples - c * MC_CHUNK);
            let mut hits = 0;
            for _ in 0..todo {
                for w in words.iter_mut() {
                    *w = rng.next_u64();
                }
                if signed_sum(&tables, &words) >= threshold {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    (1 + count) as f64 / (resamples + 1) as f64
}

/// Seed for one ordered pair, derived from the run seed.
pub fn pair_seed(seed: u64, f: &str, g: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"sign-permutation/v1");
    h.update(seed.to_le_bytes());
    for id in [f, g] {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

pub fn sign_permutation_test(scores: &BlockScores, settings: &TestSettings) -> Result<PairwiseResult, AnalysisError> {
    let s = &scores.scores;
    if s.is_empty() {
        return Err(AnalysisError::Precondition("no blocks to test".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite(format!("block scores {} vs {}", scores.f, scores.g)));
    }
    let k = s.len();
    let (p_value, method, n) = if k <= settings.exact_threshold.min(30) {
        (exact_p_value(s), TestMethod::Exact, 1u64 << k)
    } else {
        let seed = pair_seed(settings.seed, &scores.f, &scores.g);
        (
            monte_carlo_p_value(s, settings.resamples, seed),
            TestMethod::MonteCarlo,
            settings.resamples as u64,
        )
    };
    Ok(PairwiseResult {
        f: scores.f.clone(),
        g: scores.g.clone(),
        statistic: s.iter().sum(),
        p_value,
        method,
        n_resamples: n,
        alpha_sig: settings.alpha_sig,
        decision: p_value <= settings.alpha_sig,
    })
}

pub fn compare(pf: &AccuracyProfile, pg: &AccuracyProfile, settings: &TestSettings) -> Result<PairwiseResult, AnalysisError> {
    sign_permutation_test(&block_scores(pf, pg)?, settings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBound {
    pub bound: Option<f64>,
    pub reference_id: Option<String>,
    /// Tests run, in scan order.
    pub tests: Vec<PairwiseResult>,
}

/// Scan references from largest to smallest and stop at the first one the
/// target significantly beats.
pub fn relative_lower_bound(
    target: &AccuracyProfile,
    references: &[(&AccuracyProfile, f64)],
    settings: &TestSettings,
) -> Result<RelativeBound, AnalysisError> {
    if references.is_empty() {
        return Err(AnalysisError::Precondition("no dense reference profiles".into()));
    }
    let mut order: Vec<&(&AccuracyProfile, f64)> =
        references.iter().filter(|(p, _)| p.model_id != target.model_id).collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.model_id.cmp(&b.0.model_id)));
    let mut tests = Vec::new();
    for (reference, size) in order {
        let r = compare(target, reference, settings)?;
        let rejected = r.decision;
        tests.push(r);
        if rejected {
            return Ok(RelativeBound {
                bound: Some(*size),
                reference_id: Some(reference.model_id.clone()),
                tests,
            });
        }
    }
    Ok(RelativeBound {
        bound: None,
        reference_id: None,
        tests,
    })
}

/// All ordered pairs `(f, g)` with `f != g`, in roster order.
pub fn all_ordered_pairs(profiles: &[&AccuracyProfile], settings: &TestSettings) -> Result<Vec<PairwiseResult>, AnalysisError> {
    let pairs: Vec<(usize, usize)> = (0..profiles.len())
        .flat_map(|i| (0..profiles.len()).filter(move |&j| j != i).map(move |j| (i, j)))
        .collect();
    pairs
        .iter()
        .map(|&(i, j)| compare(profiles[i], profiles[j], settings))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauMetrics {
    pub tau: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    /// Undefined when the test never rejects.
    pub precision: Option<f64>,
    /// Undefined when no pair is truly larger.
    pub recall: Option<f64>,
    pub accuracy: f64,
}

/// Score test decisions against the ground truth `|f| > (1 + tau) |g|`.
pub fn tau_sweep_evaluation(
    results: &[PairwiseResult],
    sizes: &HashMap<String, f64>,
    taus: &[f64],
) -> Result<Vec<TauMetrics>, AnalysisError> {
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        let sf = sizes.get(&r.f);
        let sg = sizes.get(&r.g);
        match (sf, sg) {
            (Some(a), Some(b)) => pairs.push((*a, *b, r.decision)),
            _ => {
                return Err(AnalysisError::Precondition(format!(
                    "pair {} vs {} lacks a known size",
                    r.f, r.g
                )))
            }
        }
    }
    Ok(taus
        .iter()
        .map(|&tau| {
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for &(a, b, decided) in &pairs {
                match (a > (1.0 + tau) * b, decided) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fn_ += 1,
                }
            }
            let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
            TauMetrics {
                tau,
                true_positive: tp,
                false_positive: fp,
                true_negative: tn,
                false_negative: fn_,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
                accuracy: ratio(tp + tn, pairs.len()).unwrap_or(1.0),
            }
        })
        .collect())
}
