//! Raw, baseline, and lifted accuracies, and the accuracy-profile vector.
//!
//! Slot layout is frozen: source texts in ascending `text_id` order, then
//! prefix lengths ascending, then the (raw, lifted) pair. For text index `j`
//! and length index `k`, raw lives at `2*(j*L + k)` and lifted right after.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::client::{judge_correct, QueryRecord};
use crate::corpus::{PrefixSample, TokenRule};
use crate::error::ProfileError;

pub const LAYOUT_VERSION: &str = "text-major/length-minor/raw-lifted/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Raw,
    Lifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    pub model_id: String,
    pub text_id: String,
    pub length: usize,
    pub n_positions: usize,
    pub n_correct: usize,
}

impl AccuracyCell {
    pub fn new(model_id: &str, text_id: &str, length: usize, n_positions: usize, n_correct: usize) -> Self {
        assert!(n_correct <= n_positions);
        Self {
            model_id: model_id.to_owned(),
            text_id: text_id.to_owned(),
            length,
            n_positions,
            n_correct,
        }
    }

    pub fn raw(&self) -> f64 {
        self.n_correct as f64 / self.n_positions as f64
    }
}

/// Count correct positions for one (model, text, length). `records` may
/// contain any number of templates per position; a position is correct when
/// any of its answers matches the target.
pub fn raw_accuracy(
    model_id: &str,
    text_id: &str,
    length: usize,
    samples: &[PrefixSample],
    records: &[QueryRecord],
    rule: &TokenRule,
) -> Result<AccuracyCell, ProfileError> {
    if samples.is_empty() {
        return Err(ProfileError::NoPositions {
            text_id: text_id.to_owned(),
            length,
        });
    }
    let mut answers: HashMap<usize, Vec<String>> = HashMap::with_capacity(samples.len());
    for r in records {
        if r.model_id != model_id || r.text_id != text_id || r.length != length {
            return Err(ProfileError::Inconsistent {
                model_id: model_id.to_owned(),
                text_id: text_id.to_owned(),
                length,
                message: format!("record for {} in the wrong cell", r.key()),
            });
        }
        answers.entry(r.position).or_default().push(r.normalized_answer.clone());
    }
    let mut n_correct = 0;
    for s in samples {
        let a = answers.get(&s.position).ok_or_else(|| ProfileError::Inconsistent {
            model_id: model_id.to_owned(),
            text_id: text_id.to_owned(),
            length,
            message: format!("no answers for position {}", s.position),
        })?;
        if judge_correct(s, a, rule) {
            n_correct += 1;
        }
    }
    Ok(AccuracyCell::new(model_id, text_id, length, samples.len(), n_correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineCurve {
    pub model_id: String,
    pub lengths: Vec<usize>,
    pub values: Vec<f64>,
}

impl BaselineCurve {
    pub fn at(&self, length: usize) -> Option<f64> {
        self.lengths.iter().position(|&l| l == length).map(|i| self.values[i])
    }
}

/// Mean over baseline texts of their per-text raw accuracy at `length`.
pub fn baseline_accuracy(
    model_id: &str,
    cells: &[AccuracyCell],
    baseline_ids: &[String],
    length: usize,
) -> Result<f64, ProfileError> {
    if baseline_ids.is_empty() {
        return Err(ProfileError::NoBaselines {
            model_id: model_id.to_owned(),
        });
    }
    let mut sum = 0.0;
    for id in baseline_ids {
        let cell = cells
            .iter()
            .find(|c| &c.text_id == id && c.length == length)
            .ok_or_else(|| ProfileError::MissingBaseline {
                model_id: model_id.to_owned(),
                text_id: id.clone(),
                length,
            })?;
        sum += cell.raw();
    }
    Ok(sum / baseline_ids.len() as f64)
}

pub fn baseline_curve(
    model_id: &str,
    cells: &[AccuracyCell],
    baseline_ids: &[String],
    lengths: &[usize],
) -> Result<BaselineCurve, ProfileError> {
    let values = lengths
        .iter()
        .map(|&l| baseline_accuracy(model_id, cells, baseline_ids, l))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(BaselineCurve {
        model_id: model_id.to_owned(),
        lengths: lengths.to_vec(),
        values,
    })
}

pub fn lifted_accuracy(cell: &AccuracyCell, baseline: &BaselineCurve) -> Option<f64> {
    baseline.at(cell.length).map(|b| cell.raw() - b)
}

/// One model's profile. Serializes as the profile file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyProfile {
    pub model_id: String,
    pub layout_version: String,
    pub lengths: Vec<usize>,
    pub text_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl AccuracyProfile {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn slot(&self, text_index: usize, length_index: usize, channel: Channel) -> usize {
        let base = 2 * (text_index * self.lengths.len() + length_index);
        match channel {
            Channel::Raw => base,
            Channel::Lifted => base + 1,
        }
    }

    pub fn get(&self, text_index: usize, length_index: usize, channel: Channel) -> f64 {
        self.values[self.slot(text_index, length_index, channel)]
    }

    pub fn raw(&self, text_index: usize, length_index: usize) -> f64 {
        self.get(text_index, length_index, Channel::Raw)
    }

    /// Check internal consistency after loading from disk.
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.layout_version != LAYOUT_VERSION {
            return Err(ProfileError::Layout(format!(
                "{}: layout {:?}, expected {LAYOUT_VERSION:?}",
                self.model_id, self.layout_version
            )));
        }
        let expected = 2 * self.text_ids.len() * self.lengths.len();
        if self.values.len() != expected {
            return Err(ProfileError::Layout(format!(
                "{}: {} values, expected {expected}",
                self.model_id,
                self.values.len()
            )));
        }
        if self.text_ids.windows(2).any(|w| w[0] >= w[1]) || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProfileError::Layout(format!("{}: text_ids/lengths not sorted", self.model_id)));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(ProfileError::Layout(format!("{}: non-finite value", self.model_id)));
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &AccuracyProfile) -> bool {
        self.layout_version == other.layout_version && self.text_ids == other.text_ids && self.lengths == other.lengths
    }
}

/// Assemble the profile from cells in any order.
pub fn build_profile(
    model_id: &str,
    cells: &[AccuracyCell],
    source_ids: &[String],
    lengths: &[usize],
    baseline: &BaselineCurve,
) -> Result<AccuracyProfile, ProfileError> {
    let text_ids: Vec<String> = source_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut lengths = lengths.to_vec();
    lengths.sort_unstable();
    lengths.dedup();
    let index: HashMap<(&str, usize), &AccuracyCell> =
        cells.iter().map(|c| ((c.text_id.as_str(), c.length), c)).collect();

    let mut values = Vec::with_capacity(2 * text_ids.len() * lengths.len());
    let mut gaps = Vec::new();
    for t in &text_ids {
        for &l in &lengths {
            match (index.get(&(t.as_str(), l)), baseline.at(l)) {
                (Some(cell), Some(b)) => {
                    let raw = cell.raw();
                    values.push(raw);
                    values.push(raw - b);
                }
                (None, _) => gaps.push((t.clone(), l)),
                (Some(_), None) => {
                    return Err(ProfileError::MissingBaseline {
                        model_id: model_id.to_owned(),
                        text_id: "<baseline curve>".into(),
                        length: l,
                    })
                }
            }
        }
    }
    if !gaps.is_empty() {
        return Err(ProfileError::MissingCells {
            model_id: model_id.to_owned(),
            gaps,
        });
    }
    Ok(AccuracyProfile {
        model_id: model_id.to_owned(),
        layout_version: LAYOUT_VERSION.to_owned(),
        lengths,
        text_ids,
        values,
    })
}

/// Mean raw accuracy per source text over the profile's lengths.
pub fn per_text_mean_from_profile(profile: &AccuracyProfile) -> BTreeMap<String, f64> {
    let l = profile.lengths.len();
    profile
        .text_ids
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let sum: f64 = (0..l).map(|k| profile.raw(j, k)).sum();
            (t.clone(), sum / l as f64)
        })
        .collect()
}

/// Mean raw accuracy per text over `lengths`, for the texts in `text_ids`.
pub fn per_text_mean_from_cells(
    model_id: &str,
    cells: &[AccuracyCell],
    text_ids: &[String],
    lengths: &[usize],
) -> Result<BTreeMap<String, f64>, ProfileError> {
    let index: HashMap<(&str, usize), &AccuracyCell> =
        cells.iter().map(|c| ((c.text_id.as_str(), c.length), c)).collect();
    let mut out = BTreeMap::new();
    let mut gaps = Vec::new();
    for t in text_ids {
        let mut sum = 0.0;
        for &l in lengths {
            match index.get(&(t.as_str(), l)) {
                Some(c) => sum += c.raw(),
                None => gaps.push((t.clone(), l)),
            }
        }
        out.insert(t.clone(), sum / lengths.len() as f64);
    }
    if gaps.is_empty() {
        Ok(out)
    } else {
        Err(ProfileError::MissingCells {
            model_id: model_id.to_owned(),
            gaps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::TransportStatus;
    use proptest::prelude::*;

    fn cell(text: &str, l: usize, n: usize, k: usize) -> AccuracyCell {
        AccuracyCell::new("m", text, l, n, k)
    }

    fn flat_baseline(lengths: &[usize], v: f64) -> BaselineCurve {
        BaselineCurve {
            model_id: "m".into(),
            lengths: lengths.to_vec(),
            values: vec![v; lengths.len()],
        }
    }

    fn samples(n: usize) -> Vec<PrefixSample> {
        (0..n)
            .map(|i| PrefixSample {
                text_id: "t".into(),
                position: 10 + i,
                length: 4,
                prefix: vec!["x".into(); 4],
                target: "yes".into(),
            })
            .collect()
    }

    fn record(position: usize, template: u8, answer: &str) -> QueryRecord {
        QueryRecord {
            model_id: "m".into(),
            text_id: "t".into(),
            position,
            length: 4,
            template_id: template,
            raw_response: answer.into(),
            normalized_answer: answer.into(),
            correct: answer == "yes",
            timestamp_ms: 0,
            transport_status: TransportStatus::Simulated,
            attempts: 1,
        }
    }

    #[test]
    fn raw_accuracy_extremes_and_counts() {
        let rule = TokenRule::default();
        let s = samples(100);
        let oracle: Vec<_> = s.iter().flat_map(|x| (1..=5).map(|t| record(x.position, t, "yes"))).collect();
        assert_eq!(raw_accuracy("m", "t", 4, &s, &oracle, &rule).unwrap().raw(), 1.0);
        let mute: Vec<_> = s.iter().flat_map(|x| (1..=5).map(|t| record(x.position, t, ""))).collect();
        assert_eq!(raw_accuracy("m", "t", 4, &s, &mute, &rule).unwrap().raw(), 0.0);
        let some: Vec<_> = s
            .iter()
            .enumerate()
            .flat_map(|(i, x)| (1..=5).map(move |t| record(x.position, t, if i < 37 && t == 3 { "yes" } else { "no" })))
            .collect();
        let c = raw_accuracy("m", "t", 4, &s, &some, &rule).unwrap();
        assert_eq!((c.n_correct, c.n_positions), (37, 100));
        assert_eq!(c.raw(), 0.37);
    }

    #[test]
    fn raw_accuracy_needs_positions() {
        let err = raw_accuracy("m", "t", 4, &[], &[], &TokenRule::default()).unwrap_err();
        assert!(matches!(err, ProfileError::NoPositions { length: 4, .. }));
    }

    #[test]
    fn baseline_is_mean_of_means() {
        let ids: Vec<String> = ["b1", "b2", "b3", "b4"].map(String::from).to_vec();
        let cells = vec![cell("b1", 4, 10, 1), cell("b2", 4, 10, 2), cell("b3", 4, 10, 3), cell("b4", 4, 10, 4)];
        assert!((baseline_accuracy("m", &cells, &ids, 4).unwrap() - 0.25).abs() < 1e-15);
        // Unequal denominators: mean of means, not pooled.
        let uneven = vec![cell("b1", 4, 10, 1), cell("b2", 4, 90, 0)];
        assert!((baseline_accuracy("m", &uneven, &ids[..2], 4).unwrap() - 0.05).abs() < 1e-15);
        let zeros: Vec<_> = ids.iter().map(|b| cell(b, 4, 10, 0)).collect();
        assert_eq!(baseline_accuracy("m", &zeros, &ids, 4).unwrap(), 0.0);
        assert!(matches!(
            baseline_accuracy("m", &cells[..3], &ids, 4),
            Err(ProfileError::MissingBaseline { .. })
        ));
    }

    #[test]
    fn lifted_examples() {
        let b = flat_baseline(&[4], 0.25);
        assert!((lifted_accuracy(&cell("t", 4, 100, 37), &b).unwrap() - 0.12).abs() < 1e-12);
        assert!((lifted_accuracy(&cell("t", 4, 100, 10), &b).unwrap() + 0.15).abs() < 1e-12);
        let own = baseline_curve("m", &[cell("t", 4, 100, 37)], &["t".into()], &[4]).unwrap();
        assert_eq!(lifted_accuracy(&cell("t", 4, 100, 37), &own).unwrap(), 0.0);
    }

    #[test]
    fn default_shape_has_444_slots() {
        let lengths = [4, 8, 10, 12, 16, 24];
        let ids: Vec<String> = (0..37).map(|i| format!("text-{i:02}")).collect();
        let cells: Vec<_> = ids.iter().flat_map(|t| lengths.map(|l| cell(t, l, 100, 50))).collect();
        let p = build_profile("m", &cells, &ids, &lengths, &flat_baseline(&lengths, 0.1)).unwrap();
        assert_eq!(p.dimension(), 444);
        p.validate().unwrap();
    }

    #[test]
    fn missing_cells_are_listed() {
        let lengths = [4, 8];
        let ids: Vec<String> = vec!["a".into(), "b".into()];
        let cells = vec![cell("a", 4, 10, 1), cell("a", 8, 10, 1), cell("b", 4, 10, 1)];
        match build_profile("m", &cells, &ids, &lengths, &flat_baseline(&lengths, 0.0)) {
            Err(ProfileError::MissingCells { gaps, .. }) => assert_eq!(gaps, vec![("b".to_owned(), 8)]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn per_text_means_agree() {
        let lengths = [4, 8, 10, 12, 16, 24];
        let ks = [2, 4, 6, 8, 10, 10];
        let cells: Vec<_> = lengths.iter().zip(ks).map(|(&l, k)| cell("a", l, 10, k)).collect();
        let ids = vec!["a".to_owned()];
        let from_cells = per_text_mean_from_cells("m", &cells, &ids, &lengths).unwrap();
        assert!((from_cells["a"] - 0.666_666_666_666_666_6).abs() < 1e-12);
        let p = build_profile("m", &cells, &ids, &lengths, &flat_baseline(&lengths, 0.0)).unwrap();
        assert!((per_text_mean_from_profile(&p)["a"] - from_cells["a"]).abs() < 1e-15);
        let flat: Vec<_> = lengths.iter().map(|&l| cell("a", l, 10, 5)).collect();
        assert_eq!(per_text_mean_from_cells("m", &flat, &ids, &lengths).unwrap()["a"], 0.5);
    }

    proptest! {
        #[test]
        fn layout_is_a_bijection_and_order_free(
            k in 1usize..6, l in 1usize..5, seed in any::<u64>(), base in 0.0f64..1.0
        ) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let lengths: Vec<usize> = (1..=l).map(|x| x * 4).collect();
            let ids: Vec<String> = (0..k).map(|i| format!("t{i}")).collect();
            let mut cells: Vec<_> = ids.iter()
                .flat_map(|t| lengths.iter().map(|&len| (t.clone(), len)))
                .map(|(t, len)| { let n = rng.random_range(1..200); cell(&t, len, n, rng.random_range(0..=n)) })
                .collect();
            let b = flat_baseline(&lengths, base);
            let p1 = build_profile("m", &cells, &ids, &lengths, &b).unwrap();
            cells.shuffle(&mut rng);
            let p2 = build_profile("m", &cells, &ids, &lengths, &b).unwrap();
            prop_assert_eq!(&p1, &p2);
            let mut seen = BTreeSet::new();
            for (j, t) in ids.iter().enumerate() {
                for (ki, &len) in lengths.iter().enumerate() {
                    let c = cells.iter().find(|c| &c.text_id == t && c.length == len).unwrap();
                    prop_assert!(seen.insert(p1.slot(j, ki, Channel::Raw)));
                    prop_assert!(seen.insert(p1.slot(j, ki, Channel::Lifted)));
                    prop_assert_eq!(p1.get(j, ki, Channel::Raw), c.raw());
                    prop_assert_eq!(p1.get(j, ki, Channel::Lifted), c.raw() - base);
                    prop_assert!((-1.0..=1.0).contains(&p1.get(j, ki, Channel::Lifted)));
                }
            }
            prop_assert_eq!(seen.len(), p1.dimension());
        }
    }
}
