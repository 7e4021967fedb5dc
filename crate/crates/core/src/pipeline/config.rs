//! Run configuration, read from a single TOML or JSON file.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::prompt::{default_templates, validate_templates};
use crate::client::simulator::SimulatorLink;
use crate::client::{ClientSettings, ModelSpec, PromptTemplate};
use crate::corpus::{SamplingPlan, TokenRule, DEFAULT_LENGTHS, DEFAULT_SAMPLES_PER_LENGTH};
use crate::error::ConfigError;
use crate::latent::{PcaOptions, SignConvention};
use crate::pairwise::{TestSettings, DEFAULT_TAU_GRID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub lengths: Vec<usize>,
    pub samples_per_length: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            lengths: DEFAULT_LENGTHS.to_vec(),
            samples_per_length: DEFAULT_SAMPLES_PER_LENGTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub alpha_sig: f64,
    pub exact_threshold: usize,
    pub resamples: usize,
    pub pca_tolerance: f64,
    pub pca_max_iterations: usize,
    pub sign: SignConvention,
    /// Require at least three dense references and run the scaling-law path.
    pub absolute: bool,
    pub tau_grid: Vec<f64>,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let t = TestSettings::default();
        let p = PcaOptions::default();
        Self {
            alpha_sig: t.alpha_sig,
            exact_threshold: t.exact_threshold,
            resamples: t.resamples,
            pca_tolerance: p.tolerance,
            pca_max_iterations: p.max_iterations,
            sign: p.sign,
            absolute: true,
            tau_grid: DEFAULT_TAU_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub link: SimulatorLink,
    /// Exposure weight per text id; unlisted texts get 0.
    pub popularity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Append-only query cache. Without one, answers live only for the run.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub client: ClientSettings,
    #[serde(default)]
    pub normalization: TokenRule,
    #[serde(default)]
    pub simulator: SimulatorSection,
    /// Defaults to the five built-in templates.
    #[serde(default)]
    pub templates: Option<Vec<PromptTemplate>>,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    /// Minimal configuration over a manifest; everything else defaulted.
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            cache: None,
            output_dir: default_output_dir(),
            corpus: CorpusSection {
                manifest: manifest.into(),
            },
            sampling: SamplingSection::default(),
            inference: InferenceSection::default(),
            client: ClientSettings::default(),
            normalization: TokenRule::default(),
            simulator: SimulatorSection::default(),
            templates: None,
            models: Vec::new(),
        }
    }

    pub fn from_toml_str(src: &str) -> Result<Self, ConfigError> {
        toml::from_str(src).map_err(|e| ConfigError::invalid("config", e.to_string().trim_end().to_owned()))
    }

    pub fn from_json_str(src: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(src).map_err(|e| ConfigError::invalid("config", e.to_string()))
    }

    /// Read a `.toml` or `.json` file. Relative paths inside are resolved
    /// against the file's directory.
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let parsed = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&src),
            _ => Self::from_toml_str(&src),
        };
        let mut cfg = parsed.map_err(|e| ConfigError::File {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_relative(base);
        Ok(cfg)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.manifest);
        fix(&mut self.output_dir);
        if let Some(c) = self.cache.as_mut() {
            fix(c);
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        SamplingPlan {
            lengths: self.sampling.lengths.clone(),
            samples_per_length: self.sampling.samples_per_length,
            seed: self.seed,
        }
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        self.templates.clone().unwrap_or_else(default_templates)
    }

    pub fn test_settings(&self) -> TestSettings {
        TestSettings {
            alpha_sig: self.inference.alpha_sig,
            exact_threshold: self.inference.exact_threshold,
            resamples: self.inference.resamples,
            seed: self.seed,
        }
    }

    pub fn pca_options(&self) -> PcaOptions {
        PcaOptions {
            tolerance: self.inference.pca_tolerance,
            max_iterations: self.inference.pca_max_iterations,
            sign: self.inference.sign,
        }
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.model_id == id)
    }

    pub fn dense_references(&self) -> impl Iterator<Item = &ModelSpec> {
        self.models.iter().filter(|m| m.is_dense_reference())
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let plan = self.sampling_plan();
        plan.validate()
            .map_err(|e| ConfigError::invalid("sampling", e.to_string()))?;

        let templates = self.templates();
        for (i, t) in templates.iter().enumerate() {
            t.validate().map_err(|e| ConfigError::invalid(format!("templates[{i}]"), e.to_string()))?;
        }
        validate_templates(&templates)?;

        let inf = &self.inference;
        if !(inf.alpha_sig > 0.0 && inf.alpha_sig < 1.0) {
            return Err(ConfigError::invalid("inference.alpha_sig", "must lie in (0, 1)"));
        }
        if inf.resamples == 0 {
            return Err(ConfigError::invalid("inference.resamples", "must be at least 1"));
        }
        if inf.exact_threshold > 30 {
            return Err(ConfigError::invalid("inference.exact_threshold", "at most 30 blocks can be enumerated"));
        }
        if inf.pca_tolerance.is_nan() || inf.pca_tolerance <= 0.0 {
            return Err(ConfigError::invalid("inference.pca_tolerance", "must be positive"));
        }
        if inf.tau_grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(ConfigError::invalid("inference.tau_grid", "values must be non-negative"));
        }

        let mut seen = HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            if !seen.insert(m.model_id.as_str()) {
                return Err(ConfigError::invalid(
                    format!("models[{i}].model_id"),
                    format!("duplicate id {:?}", m.model_id),
                ));
            }
            m.validate().map_err(|e| match e {
                ConfigError::Invalid { message, .. } => ConfigError::invalid(format!("models[{i}] ({})", m.model_id), message),
                other => other,
            })?;
            if m.simulated.is_none() && !m.reasoning_disabled {
                return Err(ConfigError::ReasoningEnabled {
                    model_id: m.model_id.clone(),
                });
            }
        }
        if inf.absolute {
            let n = self.dense_references().count();
            if n < 3 {
                return Err(ConfigError::invalid(
                    "models",
                    format!("absolute inference needs at least 3 dense references, found {n}"),
                ));
            }
        }
        for (text, w) in &self.simulator.popularity {
            if !(0.0..=1.0).contains(w) {
                return Err(ConfigError::invalid(
                    format!("simulator.popularity.{text}"),
                    format!("weight {w} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[corpus]
manifest = "corpus/manifest.toml"

[inference]
absolute = false

[[models]]
model_id = "a"
simulated = { pseudo_size = 8.0 }
"#;

    #[test]
    fn minimal_toml_uses_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.sampling.lengths, vec![4, 8, 10, 12, 16, 24]);
        assert_eq!(c.inference.resamples, 100_000);
        assert_eq!(c.inference.tau_grid.len(), 15);
        assert_eq!(c.templates().len(), 5);
        assert_eq!(c.sampling_plan().seed, 3);
    }

    #[test]
    fn json_is_accepted() {
        let c = RunConfig::from_json_str(
            r#"{"corpus": {"manifest": "m.toml"}, "inference": {"absolute": false},
                "models": [{"model_id": "x", "simulated": {"pseudo_size": 3}}]}"#,
        )
        .unwrap();
        c.validate().unwrap();
    }

    #[test]
    fn typos_report_their_location() {
        let err = RunConfig::from_toml_str(&MINIMAL.replace("[inference]", "[inference]\nalpha = 0.1")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("alpha") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.inference.alpha_sig = 1.5;
        assert!(c.validate().unwrap_err().to_string().starts_with("inference.alpha_sig"));

        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.models.push(c.models[0].clone());
        assert!(c.validate().unwrap_err().to_string().contains("models[1].model_id"));

        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.inference.absolute = true;
        assert!(c.validate().unwrap_err().to_string().contains("at least 3 dense references"));

        let mut c = RunConfig::from_toml_str(MINIMAL).unwrap();
        c.sampling.lengths = vec![8, 4];
        assert!(c.validate().unwrap_err().to_string().starts_with("sampling"));
    }

    #[test]
    fn live_models_must_disable_reasoning() {
        let cfg = MINIMAL.to_owned() + "\n[[models]]\nmodel_id = \"live\"\nendpoint = \"https://example.invalid/v1\"\n";
        let c = RunConfig::from_toml_str(&cfg).unwrap();
        assert!(matches!(c.validate(), Err(ConfigError::ReasoningEnabled { .. })));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, MINIMAL.replace("seed = 3", "seed = 3\ncache = \"c/q.jsonl\"")).unwrap();
        let c = RunConfig::read(&path).unwrap();
        assert_eq!(c.corpus.manifest, dir.path().join("corpus/manifest.toml"));
        assert_eq!(c.cache.unwrap(), dir.path().join("c/q.jsonl"));
        assert_eq!(c.output_dir, dir.path().join("out"));
    }
}
