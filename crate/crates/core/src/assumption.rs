//! Do models agree on which texts they know best?
//!
//! Each model ranks texts by mean raw accuracy. High pairwise Spearman
//! agreement on source texts, and clearly lower agreement on baseline texts,
//! supports treating the source texts as uniformly present in training data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::AnalysisError;

const EXACT_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextBasis {
    SourceTexts,
    BaselineTexts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRanking {
    pub model_id: String,
    pub basis: TextBasis,
    /// 1 is the highest mean accuracy; ties share the average rank.
    pub ranks: BTreeMap<String, f64>,
}

/// Average ranks of `values` in descending order (largest gets rank 1).
pub fn descending_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn rank_texts(
    model_id: &str,
    per_text_means: &BTreeMap<String, f64>,
    basis: TextBasis,
) -> Result<TextRanking, AnalysisError> {
    if per_text_means.len() < 2 {
        return Err(AnalysisError::Precondition(format!(
            "{model_id}: ranking needs at least 2 texts"
        )));
    }
    let values: Vec<f64> = per_text_means.values().copied().collect();
    let ranks = descending_ranks(&values);
    Ok(TextRanking {
        model_id: model_id.to_owned(),
        basis,
        ranks: per_text_means.keys().cloned().zip(ranks).collect(),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of the two rank vectors.
pub fn spearman_rho(a: &TextRanking, b: &TextRanking) -> Result<f64, AnalysisError> {
    if a.basis != b.basis || !a.ranks.keys().eq(b.ranks.keys()) {
        return Err(AnalysisError::Precondition(format!(
            "rankings of {} and {} cover different texts",
            a.model_id, b.model_id
        )));
    }
    let x: Vec<f64> = a.ranks.values().copied().collect();
    let y: Vec<f64> = b.ranks.values().copied().collect();
    pearson(&x, &y).ok_or_else(|| {
        AnalysisError::UndefinedCorrelation(format!("{} vs {}: ranks have zero variance", a.model_id, b.model_id))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRho {
    pub model_a: String,
    pub model_b: String,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementSummary {
    pub group: String,
    pub pairs: Vec<PairRho>,
    pub mean_rho: f64,
    pub min_rho: f64,
    pub frac_above_080: f64,
}

impl AgreementSummary {
    pub fn rhos(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.rho).collect()
    }
}

/// Spearman correlation for every unordered pair of models.
pub fn agreement_matrix(rankings: &[TextRanking], group: &str) -> Result<AgreementSummary, AnalysisError> {
    if rankings.len() < 2 {
        return Err(AnalysisError::Precondition(format!("group {group}: need at least 2 models")));
    }
    let mut pairs = Vec::with_capacity(rankings.len() * (rankings.len() - 1) / 2);
    for (i, a) in rankings.iter().enumerate() {
        for b in &rankings[i + 1..] {
            pairs.push(PairRho {
                model_a: a.model_id.clone(),
                model_b: b.model_id.clone(),
                rho: spearman_rho(a, b)?,
            });
        }
    }
    let n = pairs.len() as f64;
    Ok(AgreementSummary {
        group: group.to_owned(),
        mean_rho: pairs.iter().map(|p| p.rho).sum::<f64>() / n,
        min_rho: pairs.iter().map(|p| p.rho).fold(f64::INFINITY, f64::min),
        frac_above_080: pairs.iter().filter(|p| p.rho > 0.80).count() as f64 / n,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    #[serde(rename = "U")]
    pub u: f64,
    pub p: f64,
    pub method: MwMethod,
    pub n_a: usize,
    pub n_b: usize,
}

/// `#(a > b) + 0.5 * #(a == b)` over all cross pairs.
pub fn u_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Exact p by enumerating every split of the pooled sample.
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let na = a.len();
    assert!(n <= 30, "exact enumeration limited to 30 observations");
    let observed = u_statistic(a, b);
    let (mut hits, mut total) = (0u64, 0u64);
    let (mut ga, mut gb) = (Vec::with_capacity(na), Vec::with_capacity(n - na));
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        ga.clear();
        gb.clear();
        for (i, v) in pooled.iter().enumerate() {
            if mask >> i & 1 == 1 {
                ga.push(*v);
            } else {
                gb.push(*v);
            }
        }
        total += 1;
        if u_statistic(&ga, &gb) >= observed - 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / total as f64
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let u = u_statistic(a, b);
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1] == pooled[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - na * nb / 2.0 - 0.5) / var.sqrt();
    (0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(0.0, 1.0)
}

/// One-sided test that `a` is stochastically larger than `b`.
pub fn mann_whitney_one_sided(a: &[f64], b: &[f64]) -> Result<MannWhitney, AnalysisError> {
    if a.is_empty() || b.is_empty() {
        return Err(AnalysisError::Precondition("Mann-Whitney needs two non-empty samples".into()));
    }
    let (p, method) = if a.len() + b.len() <= EXACT_LIMIT {
        (mann_whitney_exact(a, b), MwMethod::Exact)
    } else {
        (mann_whitney_normal(a, b), MwMethod::Normal)
    };
    Ok(MannWhitney {
        u: u_statistic(a, b),
        p,
        method,
        n_a: a.len(),
        n_b: b.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub pairs: usize,
    pub mean_rho: f64,
    pub min_rho: f64,
    pub frac_above_080: f64,
}

impl From<&AgreementSummary> for GroupSummary {
    fn from(s: &AgreementSummary) -> Self {
        Self {
            pairs: s.pairs.len(),
            mean_rho: s.mean_rho,
            min_rho: s.min_rho,
            frac_above_080: s.frac_above_080,
        }
    }
}

/// Both agreement groups plus the separation test between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub source: AgreementSummary,
    pub baseline: AgreementSummary,
    pub separation: MannWhitney,
}

#[derive(Serialize)]
struct ValidationJson<'a> {
    mean_rho: f64,
    min_rho: f64,
    frac_above_080: f64,
    #[serde(rename = "U")]
    u: f64,
    p: f64,
    method: MwMethod,
    source: GroupSummary,
    baseline: GroupSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

impl ValidationReport {
    pub fn build(sources: &[TextRanking], baselines: &[TextRanking]) -> Result<Self, AnalysisError> {
        let source = agreement_matrix(sources, "source")?;
        let baseline = agreement_matrix(baselines, "baseline")?;
        let separation = mann_whitney_one_sided(&source.rhos(), &baseline.rhos())?;
        Ok(Self {
            source,
            baseline,
            separation,
        })
    }

    /// Headline fields describe the source-text group.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ValidationJson {
            mean_rho: self.source.mean_rho,
            min_rho: self.source.min_rho,
            frac_above_080: self.source.frac_above_080,
            u: self.separation.u,
            p: self.separation.p,
            method: self.separation.method,
            source: (&self.source).into(),
            baseline: (&self.baseline).into(),
            note: None,
        })
        .expect("plain data serializes")
    }

    pub fn write_pairs_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["group", "model_a", "model_b", "rho"])?;
        for s in [&self.source, &self.baseline] {
            for p in &s.pairs {
                out.write_record([s.group.as_str(), &p.model_a, &p.model_b, &format!("{:.6}", p.rho)])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn means(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect()
    }

    fn ranking(id: &str, ranks: &[f64]) -> TextRanking {
        TextRanking {
            model_id: id.into(),
            basis: TextBasis::SourceTexts,
            ranks: ranks.iter().enumerate().map(|(i, r)| (format!("t{i}"), *r)).collect(),
        }
    }

    #[test]
    fn rank_examples() {
        let r = rank_texts("m", &means(&[("a", 0.9), ("b", 0.5), ("c", 0.1)]), TextBasis::SourceTexts).unwrap();
        assert_eq!(r.ranks.values().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
        let r = rank_texts("m", &means(&[("a", 0.5), ("b", 0.5), ("c", 0.1)]), TextBasis::SourceTexts).unwrap();
        assert_eq!(r.ranks.values().copied().collect::<Vec<_>>(), vec![1.5, 1.5, 3.0]);
        let r = rank_texts("m", &means(&[("a", 0.2), ("b", 0.2), ("c", 0.2), ("d", 0.2)]), TextBasis::SourceTexts).unwrap();
        assert!(r.ranks.values().all(|v| *v == 2.5));
        assert!(rank_texts("m", &means(&[("a", 0.2)]), TextBasis::SourceTexts).is_err());
    }

    #[test]
    fn spearman_examples() {
        let x = ranking("x", &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(spearman_rho(&x, &x).unwrap(), 1.0);
        assert_eq!(spearman_rho(&x, &ranking("r", &[4.0, 3.0, 2.0, 1.0])).unwrap(), -1.0);
        let y = ranking("y", &[1.0, 3.0, 2.0, 4.0]);
        assert!((spearman_rho(&x, &y).unwrap() - 0.8).abs() < 1e-15);
        let flat = ranking("f", &[2.5; 4]);
        assert!(matches!(spearman_rho(&x, &flat), Err(AnalysisError::UndefinedCorrelation(_))));
    }

    #[test]
    fn identical_models_agree_fully() {
        let r: Vec<_> = (0..3).map(|i| ranking(&format!("m{i}"), &[1.0, 2.0, 3.0])).collect();
        let s = agreement_matrix(&r, "source").unwrap();
        assert_eq!(s.pairs.len(), 3);
        assert_eq!((s.mean_rho, s.min_rho, s.frac_above_080), (1.0, 1.0, 1.0));
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_one_sided(&[5.0, 6.0, 7.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.u, 9.0);
        assert!((r.p - 0.05).abs() < 1e-15);
        assert_eq!(r.method, MwMethod::Exact);
        let same = [1.0, 2.0, 2.0, 3.0];
        assert!(mann_whitney_one_sided(&same, &same).unwrap().p >= 0.5);
        let big: Vec<f64> = (0..20).map(f64::from).collect();
        let r = mann_whitney_one_sided(&big, &big).unwrap();
        assert_eq!(r.method, MwMethod::Normal);
        assert!(r.p >= 0.5);
        assert!(mann_whitney_one_sided(&[], &[1.0]).is_err());
    }

    #[test]
    fn normal_tail_far_out() {
        let a: Vec<f64> = (100..400).map(f64::from).collect();
        let b: Vec<f64> = (0..100).map(f64::from).collect();
        let p = mann_whitney_normal(&a, &b);
        assert!(p > 0.0 && p < 1e-40, "{p}");
    }

    #[test]
    fn exact_and_normal_agree_on_six_by_six() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let shift = rng.random_range(0.0..1.5);
            let a: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + shift).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.random::<f64>() + 0.5).collect();
            let (e, n) = (mann_whitney_exact(&a, &b), mann_whitney_normal(&a, &b));
            assert!((e - n).abs() <= 0.02, "exact {e} normal {n}");
        }
    }

    #[test]
    fn report_json_shape() {
        let src: Vec<_> = (0..3).map(|i| ranking(&format!("m{i}"), &[1.0, 2.0, 3.0, 4.0])).collect();
        let base = vec![
            ranking("m0", &[1.0, 2.0, 3.0, 4.0]),
            ranking("m1", &[4.0, 3.0, 2.0, 1.0]),
            ranking("m2", &[2.0, 1.0, 4.0, 3.0]),
        ];
        let rep = ValidationReport::build(&src, &base).unwrap();
        let j = rep.to_json();
        for key in ["mean_rho", "min_rho", "frac_above_080", "U", "p"] {
            assert!(j.get(key).is_some(), "{key}");
        }
        let mut buf = Vec::new();
        rep.write_pairs_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

    proptest! {
        #[test]
        fn rho_symmetric_and_monotone_invariant(v in prop::collection::vec(0.0f64..1.0, 3..15), w in prop::collection::vec(0.0f64..1.0, 15)) {
            let ids: Vec<String> = (0..v.len()).map(|i| format!("t{i:02}")).collect();
            let a: BTreeMap<_, _> = ids.iter().cloned().zip(v.iter().copied()).collect();
            let b: BTreeMap<_, _> = ids.iter().cloned().zip(w.iter().copied()).collect();
            let transformed: BTreeMap<_, _> = a.iter().map(|(k, x)| (k.clone(), (3.0 * x).exp())).collect();
            let ra = rank_texts("a", &a, TextBasis::SourceTexts).unwrap();
            let rb = rank_texts("b", &b, TextBasis::SourceTexts).unwrap();
            let rc = rank_texts("c", &transformed, TextBasis::SourceTexts).unwrap();
            if let (Ok(x), Ok(y)) = (spearman_rho(&ra, &rb), spearman_rho(&rb, &ra)) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&x));
                prop_assert!((spearman_rho(&rc, &rb).unwrap() - x).abs() < 1e-12);
            }
            let sum: f64 = ra.ranks.values().sum();
            let k = v.len() as f64;
            prop_assert!((sum - k * (k + 1.0) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn u_halves_sum_to_product(a in prop::collection::vec(0u8..5, 1..10), b in prop::collection::vec(0u8..5, 1..10)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            prop_assert_eq!(u_statistic(&a, &b) + u_statistic(&b, &a), (a.len() * b.len()) as f64);
        }
    }
}
