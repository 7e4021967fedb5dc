//! Text loading, word normalization, and deterministic prefix sampling.
//!
//! A text is reduced to a sequence of normalized words. Queries always ask
//! for "the next word", so the word (not a provider subword token) is the
//! unit every accuracy is counted in.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unicode_normalization::UnicodeNormalization;

use crate::error::CorpusError;

/// Default prefix lengths, in words.
pub const DEFAULT_LENGTHS: [usize; 6] = [4, 8, 10, 12, 16, 24];
/// Default number of sampled positions per (text, length).
pub const DEFAULT_SAMPLES_PER_LENGTH: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextKind {
    Source,
    Baseline,
}

impl fmt::Display for TextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextKind::Source => f.write_str("source"),
            TextKind::Baseline => f.write_str("baseline"),
        }
    }
}

/// Word normalization applied to corpus text and to model answers alike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenRule {
    pub nfkc: bool,
    pub lowercase: bool,
    /// Strip non-alphanumeric characters from both ends of each word.
    /// Internal apostrophes and hyphens survive.
    pub strip_edge_punctuation: bool,
}

impl Default for TokenRule {
    fn default() -> Self {
        Self {
            nfkc: true,
            lowercase: true,
            strip_edge_punctuation: true,
        }
    }
}

impl TokenRule {
    /// Normalize a single whitespace-free word. May return an empty string
    /// when the word consists only of punctuation.
    pub fn normalize_word(&self, word: &str) -> String {
        let mut s: String = if self.nfkc {
            word.nfkc().collect()
        } else {
            word.to_owned()
        };
        if self.strip_edge_punctuation {
            s = s.trim_matches(|c: char| !c.is_alphanumeric()).to_owned();
        }
        if self.lowercase {
            s = s.to_lowercase();
        }
        // NFKC can introduce spaces (e.g. from ligature-like compatibility forms).
        s.retain(|c| !c.is_whitespace());
        s
    }

    pub fn tokenize(&self, raw: &str) -> Vec<String> {
        raw.split_whitespace()
            .map(|w| self.normalize_word(w))
            .filter(|w| !w.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextDocument {
    text_id: String,
    title: String,
    kind: TextKind,
    tokens: Vec<String>,
}

impl TextDocument {
    pub fn text_id(&self) -> &str {
        &self.text_id
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn kind(&self) -> TextKind {
        self.kind
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token at a 1-based position.
    pub fn token_at(&self, position: usize) -> Option<&str> {
        position
            .checked_sub(1)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }
}

/// Tokenize `raw` into a document.
pub fn load_text(
    raw: &str,
    text_id: &str,
    title: &str,
    kind: TextKind,
    rule: &TokenRule,
) -> Result<TextDocument, CorpusError> {
    let tokens = rule.tokenize(raw);
    if tokens.is_empty() {
        return Err(CorpusError::EmptyDocument {
            text_id: text_id.to_owned(),
        });
    }
    Ok(TextDocument {
        text_id: text_id.to_owned(),
        title: title.to_owned(),
        kind,
        tokens,
    })
}

/// One incomplete prefix and the word that follows it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixSample {
    pub text_id: String,
    /// 1-based index of the target token.
    pub position: usize,
    pub length: usize,
    pub prefix: Vec<String>,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPlan {
    pub lengths: Vec<usize>,
    pub samples_per_length: usize,
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            lengths: DEFAULT_LENGTHS.to_vec(),
            samples_per_length: DEFAULT_SAMPLES_PER_LENGTH,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.lengths.is_empty() {
            return Err(CorpusError::InvalidPlan("no prefix lengths".into()));
        }
        if self.lengths[0] == 0 {
            return Err(CorpusError::InvalidPlan("prefix length 0".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::InvalidPlan(format!(
                "lengths must be strictly ascending, got {:?}",
                self.lengths
            )));
        }
        if self.samples_per_length == 0 {
            return Err(CorpusError::InvalidPlan("samples_per_length must be >= 1".into()));
        }
        Ok(())
    }

    pub fn max_length(&self) -> usize {
        self.lengths.last().copied().unwrap_or(0)
    }
}

/// Samples drawn for one prefix length of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LengthSamples {
    pub length: usize,
    pub samples: Vec<PrefixSample>,
    /// `samples_per_length - samples.len()`; nonzero only for short texts.
    pub shortfall: usize,
}

/// Target positions eligible for prefix length `l`: `{l+1, ..., n}`.
pub fn eligible_positions(doc: &TextDocument, l: usize) -> std::ops::RangeInclusive<usize> {
    // An empty range when l >= n.
    (l + 1)..=doc.len()
}

/// Stable per-(seed, text, length) seed. Independent of platform and std hasher.
pub fn derive_sampling_seed(seed: u64, text_id: &str, length: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"prefix-sampling/v1");
    h.update(seed.to_le_bytes());
    h.update((text_id.len() as u64).to_le_bytes());
    h.update(text_id.as_bytes());
    h.update((length as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// First `k` draws of a Fisher-Yates shuffle over `0..n`, kept sparse so long
/// texts never materialize the full index array.
pub(crate) fn sparse_partial_shuffle(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * k);
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.random_range(i..n);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        out.push(at_j);
    }
    out
}

/// Draw `min(samples_per_length, n - l)` positions per configured length,
/// uniformly without replacement, sorted by position.
pub fn sample_prefixes(doc: &TextDocument, plan: &SamplingPlan) -> Result<Vec<LengthSamples>, CorpusError> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.lengths.len());
    for &l in &plan.lengths {
        let eligible = doc.len().saturating_sub(l);
        if eligible == 0 {
            return Err(CorpusError::TooShort {
                text_id: doc.text_id.clone(),
                tokens: doc.len(),
                length: l,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_sampling_seed(plan.seed, &doc.text_id, l));
        let mut positions: Vec<usize> = sparse_partial_shuffle(&mut rng, eligible, plan.samples_per_length)
            .into_iter()
            .map(|offset| offset + l + 1)
            .collect();
        positions.sort_unstable();
        let samples = positions
            .into_iter()
            .map(|position| PrefixSample {
                text_id: doc.text_id.clone(),
                position,
                length: l,
                prefix: doc.tokens[position - 1 - l..position - 1].to_vec(),
                target: doc.tokens[position - 1].clone(),
            })
            .collect::<Vec<_>>();
        let shortfall = plan.samples_per_length.saturating_sub(samples.len());
        if shortfall > 0 {
            log::info!(
                "{}: only {} eligible positions at length {l} (short by {shortfall})",
                doc.text_id,
                samples.len()
            );
        }
        out.push(LengthSamples {
            length: l,
            samples,
            shortfall,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub text_id: String,
    pub title: String,
    pub kind: TextKind,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub texts: Vec<ManifestEntry>,
}

/// The default titles, with placeholder file paths. Text acquisition is up to the operator.
pub const DEFAULT_MANIFEST_TOML: &str = include_str!("../data/default_manifest.toml");

impl Manifest {
    pub fn from_toml(src: &str) -> Result<Self, CorpusError> {
        toml::from_str(src).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    pub fn from_json(src: &str) -> Result<Self, CorpusError> {
        serde_json::from_str(src).map_err(|e| CorpusError::Manifest(e.to_string()))
    }

    pub fn default_titles() -> Self {
        Self::from_toml(DEFAULT_MANIFEST_TOML).expect("bundled manifest parses")
    }

    /// Read a manifest file; format chosen by extension (`.json` or TOML otherwise).
    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let src = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let mut manifest = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&src)?
        } else {
            Self::from_toml(&src)?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for entry in &mut manifest.texts {
            if entry.path.is_relative() {
                entry.path = base.join(&entry.path);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = BTreeSet::new();
        for e in &self.texts {
            if e.text_id.is_empty() || e.text_id.chars().any(char::is_whitespace) {
                return Err(CorpusError::Manifest(format!("invalid text_id {:?}", e.text_id)));
            }
            if !seen.insert(e.text_id.as_str()) {
                return Err(CorpusError::Manifest(format!("duplicate text_id {:?}", e.text_id)));
            }
        }
        Ok(())
    }

    pub fn missing_files(&self) -> Vec<&Path> {
        self.texts
            .iter()
            .filter(|e| !e.path.is_file())
            .map(|e| e.path.as_path())
            .collect()
    }
}

/// A loaded corpus: documents sorted by `text_id`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<TextDocument>,
}

impl Corpus {
    pub fn new(mut docs: Vec<TextDocument>) -> Result<Self, CorpusError> {
        docs.sort_by(|a, b| a.text_id.cmp(&b.text_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].text_id == w[1].text_id) {
            return Err(CorpusError::Manifest(format!("duplicate text_id {:?}", w[0].text_id)));
        }
        Ok(Self { docs })
    }

    pub fn load(manifest: &Manifest, rule: &TokenRule) -> Result<Self, CorpusError> {
        let docs = manifest
            .texts
            .iter()
            .map(|e| {
                let raw = std::fs::read_to_string(&e.path).map_err(|err| CorpusError::Io {
                    path: e.path.clone(),
                    source: err,
                })?;
                load_text(&raw, &e.text_id, &e.title, e.kind, rule)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(docs)
    }

    /// Every document must leave at least one target position at the longest length.
    pub fn check_plan(&self, plan: &SamplingPlan) -> Result<(), CorpusError> {
        plan.validate()?;
        let max = plan.max_length();
        for d in &self.docs {
            if d.len() < max + 2 {
                return Err(CorpusError::TooShort {
                    text_id: d.text_id.clone(),
                    tokens: d.len(),
                    length: max,
                });
            }
        }
        Ok(())
    }

    pub fn docs(&self) -> &[TextDocument] {
        &self.docs
    }

    pub fn get(&self, text_id: &str) -> Option<&TextDocument> {
        self.docs
            .binary_search_by(|d| d.text_id.as_str().cmp(text_id))
            .ok()
            .map(|i| &self.docs[i])
    }

    pub fn of_kind(&self, kind: TextKind) -> impl Iterator<Item = &TextDocument> {
        self.docs.iter().filter(move |d| d.kind == kind)
    }

    pub fn source_ids(&self) -> Vec<String> {
        self.of_kind(TextKind::Source).map(|d| d.text_id.clone()).collect()
    }

    pub fn baseline_ids(&self) -> Vec<String> {
        self.of_kind(TextKind::Baseline).map(|d| d.text_id.clone()).collect()
    }
}
