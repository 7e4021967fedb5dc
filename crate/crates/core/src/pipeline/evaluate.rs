use std::collections::HashMap;

use crate::assumption::{rank_texts, TextBasis, TextRanking, ValidationReport};
use crate::error::{AnalysisError, Result};
use crate::latent::{loo_cv, LooSummary, FitArtifact};
use crate::pairwise::{all_ordered_pairs, tau_sweep_evaluation, PairwiseResult, TauMetrics};
use crate::profiles::{per_text_mean_from_cells, AccuracyProfile};

use super::bound::{fit_references, reference_profiles};
use super::measure::Measurement;
use super::{write_file, write_json, Workspace};

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub fit: FitArtifact,
    pub loo: LooSummary,
    pub pairs: Vec<PairwiseResult>,
    pub tau: Vec<TauMetrics>,
    pub assumption: Option<ValidationReport>,
}

fn rankings(ws: &Workspace, m: &Measurement, basis: TextBasis) -> Result<Vec<TextRanking>> {
    let ids = match basis {
        TextBasis::SourceTexts => ws.corpus.source_ids(),
        TextBasis::BaselineTexts => ws.corpus.baseline_ids(),
    };
    m.models
        .iter()
        .filter(|mm| mm.profile.is_some())
        .map(|mm| {
            let means = per_text_mean_from_cells(&mm.spec.model_id, &mm.cells, &ids, &ws.config.sampling.lengths)?;
            Ok(rank_texts(&mm.spec.model_id, &means, basis)?)
        })
        .collect()
}

/// Rank agreement on source texts vs baseline texts across measured models.
pub fn assumption_check(ws: &Workspace, m: &Measurement) -> Result<ValidationReport> {
    let sources = rankings(ws, m, TextBasis::SourceTexts)?;
    let baselines = rankings(ws, m, TextBasis::BaselineTexts)?;
    Ok(ValidationReport::build(&sources, &baselines)?)
}

pub fn run_assumption_check(ws: &Workspace, m: &Measurement) -> Result<ValidationReport> {
    let rep = assumption_check(ws, m)?;
    write_assumption(ws, &rep)?;
    Ok(rep)
}

fn write_assumption(ws: &Workspace, rep: &ValidationReport) -> Result<()> {
    let dir = &ws.config.output_dir;
    write_json(&dir.join("assumption.json"), &rep.to_json())?;
    let mut buf = Vec::new();
    rep.write_pairs_csv(&mut buf).expect("writing to memory");
    write_file(&dir.join("assumption_pairs.csv"), &buf)
}

/// Reference-only evaluation: leave-one-out size recovery, the pairwise test
/// over every ordered reference pair, and the rank-agreement check.
pub fn evaluate(ws: &Workspace, m: &Measurement) -> Result<Evaluation> {
    let refs = reference_profiles(ws, m)?;
    if refs.len() < 4 {
        return Err(AnalysisError::Precondition(format!(
            "evaluation needs at least 4 dense references, have {}",
            refs.len()
        ))
        .into());
    }
    let profiles: Vec<&AccuracyProfile> = refs.iter().map(|(p, _)| *p).collect();
    let sizes: Vec<f64> = refs.iter().map(|(_, s)| *s).collect();
    let fit = fit_references(ws, m)?;
    let loo = loo_cv(&profiles, &sizes, &ws.config.pca_options())?;
    let pairs = all_ordered_pairs(&profiles, &ws.config.test_settings())?;
    let size_map: HashMap<String, f64> = refs.iter().map(|(p, s)| (p.model_id.clone(), *s)).collect();
    let tau = tau_sweep_evaluation(&pairs, &size_map, &ws.config.inference.tau_grid)?;
    let assumption = if ws.corpus.baseline_ids().len() >= 2 {
        match assumption_check(ws, m) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("assumption check skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok(Evaluation {
        fit,
        loo,
        pairs,
        tau,
        assumption,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn fig3_csv(tau: &[TauMetrics]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["tau", "precision", "recall", "accuracy", "tp", "fp", "tn", "fn"])
        .expect("in memory");
    for t in tau {
        out.write_record([
            format!("{:.2}", t.tau),
            opt(t.precision),
            opt(t.recall),
            format!("{:.6}", t.accuracy),
            t.true_positive.to_string(),
            t.false_positive.to_string(),
            t.true_negative.to_string(),
            t.false_negative.to_string(),
        ])
        .expect("in memory");
    }
    String::from_utf8(out.into_inner().expect("in memory")).expect("UTF-8")
}

pub fn loocv_csv(loo: &LooSummary) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["model_id", "true_size", "z", "predicted", "ratio_error", "within_factor_two"])
        .expect("in memory");
    for p in &loo.predictions {
        out.write_record([
            p.model_id.clone(),
            format!("{}", p.true_size),
            format!("{:.6}", p.z),
            format!("{:.3}", p.predicted),
            format!("{:.4}", p.ratio_error()),
            (p.ratio_error() <= 2.0).to_string(),
        ])
        .expect("in memory");
    }
    String::from_utf8(out.into_inner().expect("in memory")).expect("UTF-8")
}

pub fn pairwise_csv(pairs: &[PairwiseResult]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["f", "g", "statistic", "p_value", "method", "decision"])
        .expect("in memory");
    for r in pairs {
        out.write_record([
            r.f.clone(),
            r.g.clone(),
            format!("{:.6}", r.statistic),
            format!("{:.6}", r.p_value),
            r.method.to_string(),
            r.decision.to_string(),
        ])
        .expect("in memory");
    }
    String::from_utf8(out.into_inner().expect("in memory")).expect("UTF-8")
}

/// Evaluate and write `fig3.csv`, `loocv.csv`, `pairwise.csv`, `fit.json`
/// and the assumption report.
pub fn run_evaluate(ws: &Workspace, m: &Measurement) -> Result<Evaluation> {
    let e = evaluate(ws, m)?;
    let dir = &ws.config.output_dir;
    write_file(&dir.join("fig3.csv"), fig3_csv(&e.tau).as_bytes())?;
    write_file(&dir.join("loocv.csv"), loocv_csv(&e.loo).as_bytes())?;
    write_file(&dir.join("pairwise.csv"), pairwise_csv(&e.pairs).as_bytes())?;
    write_json(&dir.join("fit.json"), &e.fit)?;
    write_json(
        &dir.join("loocv_summary.json"),
        &serde_json::json!({
            "cv_r_squared": e.loo.cv_r_squared,
            "max_ratio_error": e.loo.max_ratio_error,
            "within_factor_two": e.loo.within_factor_two,
            "in_sample_r_squared": e.fit.r_squared,
        }),
    )?;
    if let Some(a) = &e.assumption {
        write_assumption(ws, a)?;
    }
    Ok(e)
}
