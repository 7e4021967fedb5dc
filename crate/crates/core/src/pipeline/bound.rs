use std::path::Path;

use crate::client::Architecture;
use crate::error::{AnalysisError, Error, Result};
use crate::latent::{calibrate, FitArtifact};
use crate::pairwise::relative_lower_bound;
use crate::profiles::AccuracyProfile;

use super::measure::Measurement;
use super::report::{combine, LowerBoundReport, TIE_POLICY};
use super::{write_file, write_json, Workspace};

/// Dense references with complete profiles, paired with their sizes.
pub fn reference_profiles<'a>(ws: &Workspace, m: &'a Measurement) -> Result<Vec<(&'a AccuracyProfile, f64)>> {
    ws.config
        .dense_references()
        .map(|spec| {
            let p = m.require_profile(&spec.model_id)?;
            Ok((p, spec.known_size.expect("dense references have a size")))
        })
        .collect()
}

/// Calibrate the latent axis and scaling law on the dense references.
pub fn fit_references(ws: &Workspace, m: &Measurement) -> Result<FitArtifact> {
    let refs = reference_profiles(ws, m)?;
    if refs.len() < 3 {
        return Err(AnalysisError::Precondition(format!(
            "absolute inference needs at least 3 dense references, have {}",
            refs.len()
        ))
        .into());
    }
    let profiles: Vec<&AccuracyProfile> = refs.iter().map(|(p, _)| *p).collect();
    let sizes: Vec<f64> = refs.iter().map(|(_, s)| *s).collect();
    let (set, law) = calibrate(&profiles, &sizes, &ws.config.pca_options())?;
    log::info!(
        "scaling law over {} references: A = {:.4}, B = {:.4}, R^2 = {:.4}",
        profiles.len(),
        law.A,
        law.B,
        law.r_squared
    );
    Ok(FitArtifact::new(&set, &law))
}

pub fn run_fit(ws: &Workspace, m: &Measurement) -> Result<FitArtifact> {
    let art = fit_references(ws, m)?;
    write_json(&ws.config.output_dir.join("fit.json"), &art)?;
    Ok(art)
}

pub fn read_fit(path: &Path) -> Result<FitArtifact> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&src).map_err(|e| Error::Format {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

/// Targets default to every model not marked as a reference.
pub fn default_targets(ws: &Workspace) -> Vec<String> {
    ws.config
        .models
        .iter()
        .filter(|m| !m.is_dense_reference())
        .map(|m| m.model_id.clone())
        .collect()
}

/// Lower bounds for each target: the absolute bound from the scaling law,
/// the relative bound from the reference scan, and the larger of the two.
pub fn lower_bounds(
    ws: &Workspace,
    m: &Measurement,
    targets: &[String],
    fit: Option<&FitArtifact>,
) -> Result<LowerBoundReport> {
    let mut report = LowerBoundReport {
        notices: vec![TIE_POLICY.to_owned()],
        ..Default::default()
    };
    let refs = reference_profiles(ws, m)?;
    let fitted;
    let artifact = match fit {
        Some(a) => Some(a),
        None if ws.config.inference.absolute && refs.len() >= 3 => {
            fitted = fit_references(ws, m)?;
            Some(&fitted)
        }
        None => {
            report
                .notices
                .push(format!("absolute path skipped: {} dense references with profiles", refs.len()));
            None
        }
    };
    if refs.is_empty() {
        report.notices.push("relative path skipped: no dense references".into());
        if artifact.is_none() {
            return Err(AnalysisError::Precondition("neither absolute nor relative inference is available".into()).into());
        }
    }

    let settings = ws.config.test_settings();
    for id in targets {
        let spec = ws
            .config
            .model(id)
            .ok_or_else(|| crate::error::ConfigError::invalid("targets", format!("unknown model {id:?}")))?;
        let profile = m.require_profile(id)?;
        let abs = artifact.map(|a| a.estimate(profile)).transpose()?;
        let rel = if refs.is_empty() {
            None
        } else {
            Some(relative_lower_bound(profile, &refs, &settings)?)
        };
        if spec.architecture != Architecture::Dense {
            log::debug!("{id}: non-dense target, reporting a lower bound only");
        }
        let (rel_lb, rel_ref) = rel.map(|r| (r.bound, r.reference_id)).unwrap_or((None, None));
        if let Some(b) = combine(id, abs.as_ref(), rel_lb, rel_ref, spec.known_size) {
            report.targets.push(b);
        } else {
            report.notices.push(format!("{id}: no bound available"));
        }
    }
    Ok(report)
}

/// Compute bounds and write `report.csv` and `report.json`.
pub fn run_bound(
    ws: &Workspace,
    m: &Measurement,
    targets: Option<&[String]>,
    fit: Option<&FitArtifact>,
) -> Result<LowerBoundReport> {
    let targets = targets.map(<[String]>::to_vec).unwrap_or_else(|| default_targets(ws));
    let report = lower_bounds(ws, m, &targets, fit)?;
    let dir = &ws.config.output_dir;
    write_file(&dir.join("report.csv"), report.to_csv_string().as_bytes())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
