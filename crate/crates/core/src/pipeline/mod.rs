//! Run orchestration: configuration, measurement, bounds, evaluation, cost.

pub mod bound;
pub mod config;
pub mod cost;
pub mod evaluate;
pub mod measure;
pub mod report;

use std::path::Path;

pub use bound::run_bound;
pub use config::RunConfig;
pub use cost::{estimate_cost, CostEstimate};
pub use evaluate::{run_evaluate, Evaluation};
pub use measure::{measure, run_measure, Measurement, ModelMeasurement};
pub use report::{combine, BoundSource, LowerBoundReport, TargetBound};

use crate::client::cache::QueryCache;
use crate::client::simulator::SimulatedModel;
use crate::client::{ModelSpec, PromptTemplate, QueryEngine};
use crate::corpus::{Corpus, Manifest};
use crate::error::{ConfigError, CorpusError, Error, Result};

/// A validated configuration with its corpus loaded.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub templates: Vec<PromptTemplate>,
}

impl Workspace {
    /// Validate the configuration and load the corpus it points to.
    pub fn load(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest_path = &config.corpus.manifest;
        if !manifest_path.exists() {
            return Err(ConfigError::invalid("corpus.manifest", format!("{} does not exist", manifest_path.display())).into());
        }
        let manifest = Manifest::read(manifest_path)?;
        if let Some(p) = manifest.missing_files().first() {
            return Err(CorpusError::Manifest(format!("text file {} does not exist", p.display())).into());
        }
        let corpus = Corpus::load(&manifest, &config.normalization)?;
        Self::from_parts(config, corpus)
    }

    /// Use an already loaded corpus; `config.corpus.manifest` is ignored.
    pub fn from_parts(config: RunConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        corpus.check_plan(&config.sampling_plan())?;
        for text in config.simulator.popularity.keys() {
            if corpus.get(text).is_none() {
                return Err(ConfigError::invalid(
                    format!("simulator.popularity.{text}"),
                    "no such text in the corpus",
                )
                .into());
            }
        }
        let templates = config.templates();
        Ok(Self {
            config,
            corpus,
            templates,
        })
    }

    pub fn simulated_model(&self, spec: &ModelSpec) -> Option<SimulatedModel> {
        spec.simulated.as_ref().map(|s| SimulatedModel {
            model_id: spec.model_id.clone(),
            pseudo_size: s.pseudo_size,
            popularity_weights: self.config.simulator.popularity.clone(),
            noise_seed: s.noise_seed,
            link: self.config.simulator.link,
        })
    }

    /// Query engine over the configured cache (in memory when none is set).
    pub fn engine(&self, offline: bool) -> Result<QueryEngine> {
        let cache = match &self.config.cache {
            Some(p) => QueryCache::open(p)?,
            None => QueryCache::in_memory(),
        };
        Ok(QueryEngine::new(
            cache,
            self.config.client.clone(),
            self.config.normalization,
            offline,
        ))
    }

    /// Rough prompt size in tokens, used for progress accounting.
    pub fn mean_prompt_tokens(&self) -> f64 {
        cost::mean_prompt_tokens(self)
    }
}

/// File-system-safe version of a model id.
pub fn file_stem(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}
