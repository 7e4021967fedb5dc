use std::collections::HashSet;
use std::path::Path;

use crate::client::{BoundModel, ModelSpec, PromptTemplate, QueryEngine, StatsSnapshot};
use crate::corpus::{sample_prefixes, LengthSamples, PrefixSample, TextKind};
use crate::error::{ClientError, ConfigError, Error, MissingCell, ProfileError, Result};
use crate::profiles::{
    baseline_curve, build_profile, lifted_accuracy, raw_accuracy, AccuracyCell, AccuracyProfile, BaselineCurve,
};

use super::{file_stem, write_file, Workspace};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeasurement {
    pub spec: ModelSpec,
    pub cells: Vec<AccuracyCell>,
    pub baseline: Option<BaselineCurve>,
    pub profile: Option<AccuracyProfile>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Measurement {
    pub models: Vec<ModelMeasurement>,
    pub missing: Vec<MissingCell>,
    pub stats: StatsSnapshot,
}

impl Measurement {
    pub fn get(&self, model_id: &str) -> Option<&ModelMeasurement> {
        self.models.iter().find(|m| m.spec.model_id == model_id)
    }

    pub fn profile(&self, model_id: &str) -> Option<&AccuracyProfile> {
        self.get(model_id).and_then(|m| m.profile.as_ref())
    }

    /// Profile of `model_id`, or a partial-measurement error listing its gaps.
    pub fn require_profile(&self, model_id: &str) -> Result<&AccuracyProfile> {
        self.profile(model_id).ok_or_else(|| {
            let mut missing: Vec<MissingCell> =
                self.missing.iter().filter(|c| c.model_id == model_id).cloned().collect();
            if missing.is_empty() {
                missing.push(MissingCell {
                    model_id: model_id.to_owned(),
                    text_id: String::new(),
                    length: 0,
                    reason: "model was not measured".into(),
                });
            }
            Error::Partial { missing }
        })
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Samples for every document, computed once and shared by all models.
pub(crate) fn plan_samples(ws: &Workspace) -> Result<Vec<(TextKind, Vec<LengthSamples>)>> {
    let plan = ws.config.sampling_plan();
    ws.corpus
        .docs()
        .iter()
        .map(|d| Ok((d.kind(), sample_prefixes(d, &plan)?)))
        .collect()
}

fn measure_model(
    ws: &Workspace,
    engine: &QueryEngine,
    bound: &BoundModel,
    samples: &[(TextKind, Vec<LengthSamples>)],
    templates: &[PromptTemplate],
    missing: &mut Vec<MissingCell>,
) -> Result<ModelMeasurement> {
    let model_id = bound.id().to_owned();
    let mut cells = Vec::new();
    let mut dead: Option<String> = None;
    for (_, per_length) in samples {
        for ls in per_length {
            if ls.samples.is_empty() {
                continue;
            }
            let text_id = ls.samples[0].text_id.clone();
            let gap = |reason: String| MissingCell {
                model_id: model_id.clone(),
                text_id: text_id.clone(),
                length: ls.length,
                reason,
            };
            if let Some(reason) = &dead {
                missing.push(gap(reason.clone()));
                continue;
            }
            let jobs: Vec<(&PrefixSample, &PromptTemplate)> = ls
                .samples
                .iter()
                .flat_map(|s| templates.iter().map(move |t| (s, t)))
                .collect();
            let results = engine.query_batch(bound, &jobs)?;
            let mut records = Vec::with_capacity(results.len());
            let mut first_err: Option<ClientError> = None;
            for r in results {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(e) => {
                        first_err.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_err {
                let reason = e.to_string();
                if let ClientError::Unreachable { .. } = e {
                    log::error!("{model_id}: endpoint unreachable; skipping its remaining cells");
                    dead = Some(format!("skipped after failure: {reason}"));
                }
                missing.push(gap(reason));
                continue;
            }
            cells.push(raw_accuracy(
                &model_id,
                &text_id,
                ls.length,
                &ls.samples,
                &records,
                engine.rule(),
            )?);
        }
    }

    let lengths = &ws.config.sampling.lengths;
    let baseline_ids = ws.corpus.baseline_ids();
    let baseline = if baseline_ids.is_empty() {
        None
    } else {
        baseline_curve(&model_id, &cells, &baseline_ids, lengths).ok()
    };
    let profile = match &baseline {
        Some(b) => match build_profile(&model_id, &cells, &ws.corpus.source_ids(), lengths, b) {
            Ok(p) => Some(p),
            Err(ProfileError::MissingCells { .. }) => None,
            Err(e) => return Err(e.into()),
        },
        None => None,
    };
    if baseline_ids.is_empty() {
        missing.push(MissingCell {
            model_id: model_id.clone(),
            text_id: String::new(),
            length: 0,
            reason: "corpus has no baseline texts".into(),
        });
    }
    Ok(ModelMeasurement {
        spec: bound.spec.clone(),
        cells,
        baseline,
        profile,
    })
}

/// Query every (text, length, position, template) cell for the selected
/// models, cache first. Unreachable cells are reported, not fatal.
pub fn measure(ws: &Workspace, engine: &QueryEngine, model_ids: Option<&[String]>) -> Result<Measurement> {
    let samples = plan_samples(ws)?;
    let templates = ws.templates.clone();
    let wanted: Option<HashSet<&str>> = model_ids.map(|ids| ids.iter().map(String::as_str).collect());
    if let Some(w) = &wanted {
        for id in w {
            if ws.config.model(id).is_none() {
                return Err(ConfigError::invalid("models", format!("unknown model {id:?}")).into());
            }
        }
    }
    let mut out = Measurement::default();
    for spec in &ws.config.models {
        if wanted.as_ref().is_some_and(|w| !w.contains(spec.model_id.as_str())) {
            continue;
        }
        let before = engine.stats();
        let bound = engine.bind(spec, ws.simulated_model(spec))?;
        let m = measure_model(ws, engine, &bound, &samples, &templates, &mut out.missing)?;
        let after = engine.stats();
        let new_queries = after.network_requests - before.network_requests + after.simulated_queries
            - before.simulated_queries;
        log::info!(
            "{}: {} cells, {} new queries, {} cache hits, ~{} prompt tokens",
            spec.model_id,
            m.cells.len(),
            new_queries,
            after.cache_hits - before.cache_hits,
            new_queries * ws.mean_prompt_tokens() as u64,
        );
        if ws.config.cache.is_none() {
            // Ephemeral cache: nothing will read these records again.
            engine.with_cache(|c| c.evict_model(&spec.model_id));
        }
        out.models.push(m);
    }
    out.stats = engine.stats();
    Ok(out)
}

pub fn write_cells_csv<W: std::io::Write>(ws: &Workspace, m: &Measurement, w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model_id", "text_id", "kind", "length", "n_positions", "n_correct", "raw", "lifted"])?;
    for mm in &m.models {
        for c in &mm.cells {
            let kind = ws.corpus.get(&c.text_id).map(|d| d.kind().to_string()).unwrap_or_default();
            let lifted = mm
                .baseline
                .as_ref()
                .and_then(|b| lifted_accuracy(c, b))
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.write_record([
                mm.spec.model_id.clone(),
                c.text_id.clone(),
                kind,
                c.length.to_string(),
                c.n_positions.to_string(),
                c.n_correct.to_string(),
                format!("{:.6}", c.raw()),
                lifted,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write `profiles/<model>.json` for every complete model and `cells.csv`.
pub fn write_measurement(ws: &Workspace, m: &Measurement, dir: &Path) -> Result<()> {
    let pdir = dir.join("profiles");
    std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    for mm in &m.models {
        if let Some(p) = &mm.profile {
            let path = pdir.join(format!("{}.json", file_stem(&p.model_id)));
            let json = serde_json::to_string_pretty(p).expect("profile serializes");
            write_file(&path, json.as_bytes())?;
        }
    }
    let mut buf = Vec::new();
    write_cells_csv(ws, m, &mut buf).expect("writing to memory");
    write_file(&dir.join("cells.csv"), &buf)
}

/// Measure, write profiles, and fail with the gap list if anything is missing.
pub fn run_measure(ws: &Workspace, engine: &QueryEngine, model_ids: Option<&[String]>) -> Result<Measurement> {
    let m = measure(ws, engine, model_ids)?;
    write_measurement(ws, &m, &ws.config.output_dir)?;
    if !m.missing.is_empty() {
        return Err(Error::Partial {
            missing: m.missing.clone(),
        });
    }
    Ok(m)
}

/// Load a profile file written by [`write_measurement`].
pub fn read_profile(path: &Path) -> Result<AccuracyProfile> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: AccuracyProfile = serde_json::from_str(&src).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    p.validate()?;
    Ok(p)
}
