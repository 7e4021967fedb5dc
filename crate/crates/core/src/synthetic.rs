//! Synthetic corpora and simulated model zoos for offline runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::client::simulator::SimulatorLink;
use crate::client::{Architecture, ModelSpec, Role, SimulatedParams};
use crate::corpus::{load_text, Corpus, ManifestEntry, TextKind, TokenRule};
use crate::error::{Error, Result};
use crate::pipeline::config::RunConfig;
use crate::pipeline::Workspace;

/// Parameter counts, in billions, of a 19-model dense reference ladder.
pub const REFERENCE_SIZES: [f64; 19] = [
    405.0, 405.0, 124.0, 111.0, 104.0, 72.0, 70.0, 70.0, 35.0, 27.0, 27.0, 27.0, 24.0, 24.0, 14.0, 12.0, 12.0, 9.0, 8.0,
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ner", "tu", "sa", "vel", "or", "in", "da", "pe", "ru", "an", "shi", "go", "em", "ta", "bri",
    "yo", "cal", "fen", "ur", "zo", "wi",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ZooSpec {
    pub n_sources: usize,
    pub n_baselines: usize,
    pub tokens_per_text: usize,
    pub vocabulary: usize,
    /// Source-text popularity weights are spread evenly over this range.
    pub popularity_range: (f64, f64),
    pub sizes: Vec<f64>,
    /// Log-normal jitter of each simulator's behavioural size around its
    /// reported size.
    pub size_noise_sigma: f64,
    pub link: SimulatorLink,
    pub seed: u64,
}

impl Default for ZooSpec {
    fn default() -> Self {
        Self {
            n_sources: 37,
            n_baselines: 4,
            tokens_per_text: 600,
            vocabulary: 4000,
            popularity_range: (0.15, 1.0),
            sizes: REFERENCE_SIZES.to_vec(),
            size_noise_sigma: 0.0,
            link: SimulatorLink::default(),
            seed: 1,
        }
    }
}

pub fn source_id(i: usize) -> String {
    format!("source-{:02}", i + 1)
}

pub fn baseline_id(i: usize) -> String {
    format!("baseline-{}", i + 1)
}

/// Ids like `dense-405b-1`, numbered within equal sizes.
pub fn reference_ids(sizes: &[f64]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    sizes
        .iter()
        .map(|s| {
            let base = format!("dense-{}b", crate::latent::round_half_up(*s));
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            format!("{base}-{n}")
        })
        .collect()
}

fn vocabulary(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut words = std::collections::BTreeSet::new();
    while words.len() < n {
        let k = rng.random_range(1..=3);
        let w: String = (0..k).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
        words.insert(w);
    }
    let mut v: Vec<String> = words.into_iter().collect();
    v.shuffle(rng);
    v
}

/// Raw text with sentence punctuation and capitals, words drawn with a
/// Zipf-like skew.
fn raw_text(vocab: &[String], tokens: usize, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::with_capacity(tokens * 7);
    let mut sentence_start = true;
    for i in 0..tokens {
        let r: f64 = rng.random();
        let idx = ((vocab.len() as f64).powf(r) as usize).saturating_sub(1).min(vocab.len() - 1);
        let w = &vocab[idx];
        if i > 0 {
            out.push(' ');
        }
        if sentence_start {
            let mut c = w.chars();
            if let Some(f) = c.next() {
                out.extend(f.to_uppercase());
                out.push_str(c.as_str());
            }
        } else {
            out.push_str(w);
        }
        sentence_start = false;
        match rng.random_range(0..20) {
            0 | 1 => {
                out.push('.');
                sentence_start = true;
            }
            2 => out.push(','),
            _ => {}
        }
    }
    out.push('.');
    out
}

/// `(text_id, title, kind, raw)` for every synthetic text.
pub fn synthetic_texts(spec: &ZooSpec) -> Vec<(String, String, TextKind, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e57_c0de);
    let vocab = vocabulary(spec.vocabulary, &mut rng);
    let mut out = Vec::with_capacity(spec.n_sources + spec.n_baselines);
    for i in 0..spec.n_sources {
        out.push((
            source_id(i),
            format!("Synthetic source {}", i + 1),
            TextKind::Source,
            raw_text(&vocab, spec.tokens_per_text, &mut rng),
        ));
    }
    for i in 0..spec.n_baselines {
        out.push((
            baseline_id(i),
            format!("Synthetic baseline {}", i + 1),
            TextKind::Baseline,
            raw_text(&vocab, spec.tokens_per_text, &mut rng),
        ));
    }
    out
}

pub fn synthetic_corpus(spec: &ZooSpec, rule: &TokenRule) -> Result<Corpus> {
    let docs = synthetic_texts(spec)
        .into_iter()
        .map(|(id, title, kind, raw)| load_text(&raw, &id, &title, kind, rule))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::new(docs)?)
}

/// Evenly spaced weights over the sources in a seeded order; baselines get 0.
pub fn popularity_weights(spec: &ZooSpec) -> BTreeMap<String, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9090);
    let (lo, hi) = spec.popularity_range;
    let mut levels: Vec<f64> = (0..spec.n_sources)
        .map(|i| {
            if spec.n_sources == 1 {
                hi
            } else {
                lo + (hi - lo) * i as f64 / (spec.n_sources - 1) as f64
            }
        })
        .collect();
    levels.shuffle(&mut rng);
    let mut w: BTreeMap<String, f64> = levels.into_iter().enumerate().map(|(i, v)| (source_id(i), v)).collect();
    for i in 0..spec.n_baselines {
        w.insert(baseline_id(i), 0.0);
    }
    w
}

/// Dense simulated references with known sizes.
pub fn reference_specs(spec: &ZooSpec) -> Vec<ModelSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let noise = Normal::new(0.0, spec.size_noise_sigma.max(0.0)).expect("finite sigma");
    reference_ids(&spec.sizes)
        .into_iter()
        .zip(&spec.sizes)
        .enumerate()
        .map(|(i, (id, &size))| {
            let jitter = if spec.size_noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ModelSpec {
                model_id: id,
                endpoint: None,
                credential_ref: None,
                known_size: Some(size),
                architecture: Architecture::Dense,
                role: Role::Reference,
                reasoning_disabled: true,
                extra_body: None,
                simulated: Some(SimulatedParams {
                    pseudo_size: size * jitter.exp(),
                    noise_seed: spec.seed.wrapping_mul(1000).wrapping_add(i as u64 + 1),
                }),
            }
        })
        .collect()
}

/// A simulated target whose architecture is unknown to the pipeline.
pub fn simulated_target(model_id: &str, pseudo_size: f64, noise_seed: u64, known_size: Option<f64>) -> ModelSpec {
    ModelSpec {
        model_id: model_id.to_owned(),
        endpoint: None,
        credential_ref: None,
        known_size,
        architecture: Architecture::Unknown,
        role: Role::Target,
        reasoning_disabled: true,
        extra_body: None,
        simulated: Some(SimulatedParams { pseudo_size, noise_seed }),
    }
}

/// Configuration for the zoo; `manifest` is where the corpus would live on disk.
pub fn zoo_config(spec: &ZooSpec, manifest: impl Into<PathBuf>) -> RunConfig {
    let mut cfg = RunConfig::new(manifest);
    cfg.seed = spec.seed;
    cfg.simulator.link = spec.link;
    cfg.simulator.popularity = popularity_weights(spec);
    cfg.models = reference_specs(spec);
    cfg
}

/// In-memory workspace over the zoo: nothing touches the file system.
pub fn zoo_workspace(spec: &ZooSpec, cfg: RunConfig) -> Result<Workspace> {
    let corpus = synthetic_corpus(spec, &cfg.normalization)?;
    Workspace::from_parts(cfg, corpus)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write a runnable offline demo under `dir`: corpus, manifest and a
/// `run.toml` with the reference zoo plus a few simulated targets.
/// Returns the config path.
pub fn write_demo(dir: &Path, spec: &ZooSpec, samples_per_length: usize) -> Result<PathBuf> {
    let mut entries = Vec::new();
    for (id, title, kind, raw) in synthetic_texts(spec) {
        let rel = PathBuf::from("texts").join(format!("{id}.txt"));
        write(&dir.join("corpus").join(&rel), &raw)?;
        entries.push(ManifestEntry {
            text_id: id,
            title,
            kind,
            path: rel,
        });
    }
    let manifest = crate::corpus::Manifest { texts: entries };
    let manifest_toml = toml::to_string(&manifest).expect("manifest serializes");
    write(&dir.join("corpus/manifest.toml"), &manifest_toml)?;

    let mut cfg = zoo_config(spec, "corpus/manifest.toml");
    cfg.cache = Some(PathBuf::from("cache/queries.jsonl"));
    cfg.output_dir = PathBuf::from("out");
    cfg.sampling.samples_per_length = samples_per_length;
    cfg.models.push(simulated_target("target-moe-large", 600.0, 9001, Some(1000.0)));
    cfg.models.push(simulated_target("target-moe-mid", 160.0, 9002, Some(235.0)));
    cfg.models.push(simulated_target("target-closed-small", 18.0, 9003, None));
    let body = toml::to_string(&cfg).expect("config serializes");
    let path = dir.join("run.toml");
    write(&path, &body)?;
    Ok(path)
}
