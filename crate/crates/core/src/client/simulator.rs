//! Synthetic next-word predictor used for offline runs and as a test oracle.
//!
//! Correctness of each query is a deterministic Bernoulli draw whose success
//! probability rises with `ln(pseudo_size)` on popular texts, rises with the
//! prefix length, and scales with the text's popularity weight.
//!
//! The uniform behind the draw is shared by all templates at one position,
//! and later templates get a fixed logit penalty, so a position answered by
//! any template is answered by template 1. Independent draws per template
//! would push any-of-five accuracy toward 1 for every large model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{QueryKey, QueryRecord, TransportStatus};
use crate::corpus::{PrefixSample, TokenRule};

const DECOYS: [&str; 12] = [
    "the", "and", "of", "a", "to", "in", "that", "it", "was", "he", "with", "for",
];

/// Logistic link `p = sigmoid(a*w*ln(size) + a0*ln(size) + b*ln(l) + c*w + d + e)`
/// where `w` is the text's popularity weight and `e` is an optional per
/// (model, text) latent offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorLink {
    /// Size effect gated by popularity (memorization).
    pub memorization_slope: f64,
    /// Size effect on every text, popular or not.
    pub general_slope: f64,
    pub length_slope: f64,
    pub popularity_offset: f64,
    pub intercept: f64,
    /// Standard deviation of the per (model, text) latent offset.
    pub latent_sigma: f64,
    /// Logit penalty per template step: template `t` gets `-(t-1) * spread`.
    pub template_spread: f64,
}

impl Default for SimulatorLink {
    fn default() -> Self {
        Self {
            memorization_slope: 1.6,
            general_slope: 0.0,
            length_slope: 0.6,
            popularity_offset: -2.0,
            intercept: -4.5,
            latent_sigma: 0.0,
            template_spread: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedModel {
    pub model_id: String,
    /// Billions of parameters the simulator behaves like.
    pub pseudo_size: f64,
    /// Per-text exposure in `[0, 1]`; absent texts have weight 0.
    pub popularity_weights: BTreeMap<String, f64>,
    pub noise_seed: u64,
    pub link: SimulatorLink,
}

fn hash_u64(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

fn unit_interval(x: u64) -> f64 {
    // 53 random bits into [0, 1).
    (x >> 11) as f64 / (1u64 << 53) as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SimulatedModel {
    pub fn popularity(&self, text_id: &str) -> f64 {
        self.popularity_weights.get(text_id).copied().unwrap_or(0.0)
    }

    fn latent_offset(&self, text_id: &str) -> f64 {
        if self.link.latent_sigma == 0.0 {
            return 0.0;
        }
        let seed = self.noise_seed.to_le_bytes();
        let u1 = unit_interval(hash_u64(&[b"latent-1", &seed, text_id.as_bytes()]));
        let u2 = unit_interval(hash_u64(&[b"latent-2", &seed, text_id.as_bytes()]));
        let z = (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        self.link.latent_sigma * z
    }

    /// Success probability for template 1, which is also the probability that
    /// any template at the position succeeds.
    pub fn correct_probability(&self, text_id: &str, length: usize) -> f64 {
        sigmoid(self.logit(text_id, length))
    }

    pub fn template_probability(&self, text_id: &str, length: usize, template_id: u8) -> f64 {
        let step = f64::from(template_id.saturating_sub(1));
        sigmoid(self.logit(text_id, length) - self.link.template_spread * step)
    }

    fn logit(&self, text_id: &str, length: usize) -> f64 {
        let w = self.popularity(text_id);
        let ln_size = self.pseudo_size.ln();
        let l = self.link;
        l.memorization_slope * w * ln_size
            + l.general_slope * ln_size
            + l.length_slope * (length as f64).ln()
            + l.popularity_offset * w
            + l.intercept
            + self.latent_offset(text_id)
    }

    fn draw(&self, key: &QueryKey, salt: &[u8], per_template: bool) -> u64 {
        let template = [if per_template { key.template_id } else { 0 }];
        hash_u64(&[
            salt,
            &self.noise_seed.to_le_bytes(),
            key.text_id.as_bytes(),
            &(key.position as u64).to_le_bytes(),
            &(key.length as u64).to_le_bytes(),
            &template,
        ])
    }

    /// Raw response text for one query; the true target with probability p,
    /// otherwise a decoy word.
    pub fn respond(&self, key: &QueryKey, target: &str) -> String {
        let p = self.template_probability(&key.text_id, key.length, key.template_id);
        let u = unit_interval(self.draw(key, b"bernoulli", false));
        let style = self.draw(key, b"style", true);
        let word = if u < p {
            target.to_owned()
        } else {
            let mut i = (style >> 8) as usize % DECOYS.len();
            if DECOYS[i] == target {
                i = (i + 1) % DECOYS.len();
            }
            DECOYS[i].to_owned()
        };
        // Vary the surface form so answer normalization is exercised.
        match style % 3 {
            0 => word,
            1 => format!("{word}."),
            _ => {
                let mut c = word.chars();
                match c.next() {
                    Some(f) => f.to_uppercase().chain(c).collect(),
                    None => word,
                }
            }
        }
    }
}

/// Answer one query from the simulator.
pub fn simulate_query(
    model: &SimulatedModel,
    sample: &PrefixSample,
    template_id: u8,
    rule: &TokenRule,
) -> QueryRecord {
    let key = QueryKey {
        model_id: model.model_id.clone(),
        text_id: sample.text_id.clone(),
        position: sample.position,
        length: sample.length,
        template_id,
    };
    let raw = model.respond(&key, &sample.target);
    QueryRecord::from_response(key, raw, &sample.target, TransportStatus::Simulated, 1, 0, rule)
}
