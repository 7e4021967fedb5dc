//! Latent size index and exponential scaling law.
//!
//! Profiles of dense reference models are centered and projected onto their
//! first principal component. The projection `z` is mapped to billions of
//! parameters by `A * exp(B * z)`, fitted by least squares on `ln(size)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::AnalysisError;
use crate::profiles::AccuracyProfile;

/// How the axis sign is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Scores correlate positively with row means (higher z, more accurate).
    #[default]
    RowMeanPositive,
    RowMeanNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub sign: SignConvention,
}

impl Default for PcaOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            sign: SignConvention::RowMeanPositive,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub column_means: Vec<f64>,
    pub axis: Vec<f64>,
    pub scores: Vec<f64>,
    /// False when power iteration stalled and the eigensolver was used.
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: &mut [f64], s: f64) {
    a.iter_mut().for_each(|x| *x *= s);
}

/// `Xc^T (Xc v)` without forming the D x D covariance.
fn gram_apply(centered: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for row in centered {
        let c = dot(row, v);
        for (o, r) in out.iter_mut().zip(row) {
            *o += c * r;
        }
    }
    out
}

fn eigen_axis(centered: &[Vec<f64>]) -> Vec<f64> {
    let n = centered.len();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]));
    let eig = gram.symmetric_eigen();
    let top = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let u = eig.eigenvectors.column(top);
    let d = centered[0].len();
    let mut axis = vec![0.0; d];
    for (i, row) in centered.iter().enumerate() {
        for (a, r) in axis.iter_mut().zip(row) {
            *a += u[i] * r;
        }
    }
    let nrm = norm(&axis);
    scale(&mut axis, 1.0 / nrm);
    axis
}

/// First principal component of the row-centered matrix. Rows are models.
pub fn first_component(matrix: &[Vec<f64>], opts: &PcaOptions) -> Result<Component, AnalysisError> {
    let n = matrix.len();
    if n < 2 {
        return Err(AnalysisError::Precondition(format!("need at least 2 rows, got {n}")));
    }
    let d = matrix[0].len();
    if d == 0 || matrix.iter().any(|r| r.len() != d) {
        return Err(AnalysisError::Precondition("rows must be non-empty and equally long".into()));
    }
    if matrix.iter().flatten().any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite("profile matrix".into()));
    }

    let mut column_means = vec![0.0; d];
    for row in matrix {
        for (m, x) in column_means.iter_mut().zip(row) {
            *m += x;
        }
    }
    scale(&mut column_means, 1.0 / n as f64);
    let centered: Vec<Vec<f64>> = matrix
        .iter()
        .map(|r| r.iter().zip(&column_means).map(|(x, m)| x - m).collect())
        .collect();

    let total: f64 = centered.iter().map(|r| dot(r, r)).sum();
    let scale_ref: f64 = matrix.iter().map(|r| dot(r, r)).sum::<f64>().max(1.0);
    if total <= 1e-24 * scale_ref {
        return Err(AnalysisError::Degenerate("all profiles are identical".into()));
    }

    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut converged = false;
    for _ in 0..opts.max_iterations {
        let mut w = gram_apply(&centered, &v);
        let nw = norm(&w);
        if nw <= 1e-14 * total {
            // Start vector is orthogonal to every centered row.
            break;
        }
        scale(&mut w, 1.0 / nw);
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = w;
        if delta <= opts.tolerance {
            converged = true;
            break;
        }
    }
    let mut axis = if converged {
        v
    } else {
        log::debug!("power iteration did not converge; using symmetric eigensolver");
        eigen_axis(&centered)
    };

    let mut scores: Vec<f64> = centered.iter().map(|r| dot(r, &axis)).collect();
    let row_means: Vec<f64> = matrix.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let rm_mean = row_means.iter().sum::<f64>() / n as f64;
    let cov: f64 = scores.iter().zip(&row_means).map(|(s, m)| s * (m - rm_mean)).sum();
    let mut flip = if cov.abs() > 1e-15 * total.sqrt() {
        cov < 0.0
    } else {
        // Row means carry no signal; make the largest axis entry positive.
        let big = axis.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        big < 0.0
    };
    if opts.sign == SignConvention::RowMeanNegative {
        flip = !flip;
    }
    if flip {
        scale(&mut axis, -1.0);
        scale(&mut scores, -1.0);
    }
    Ok(Component {
        column_means,
        axis,
        scores,
        converged,
    })
}

/// Reference profiles projected onto their shared first component.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModelSet {
    pub model_ids: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub column_means: Vec<f64>,
    pub axis: Vec<f64>,
    pub scores: Vec<f64>,
    pub layout_version: String,
    pub text_ids: Vec<String>,
    pub lengths: Vec<usize>,
}

fn check_same_layout(first: &AccuracyProfile, p: &AccuracyProfile) -> Result<(), AnalysisError> {
    if first.same_layout(p) && first.dimension() == p.dimension() {
        Ok(())
    } else {
        Err(AnalysisError::Compatibility(format!(
            "profile {} does not share the layout of {}",
            p.model_id, first.model_id
        )))
    }
}

impl LatentModelSet {
    pub fn fit(profiles: &[&AccuracyProfile], opts: &PcaOptions) -> Result<Self, AnalysisError> {
        let first = profiles
            .first()
            .ok_or_else(|| AnalysisError::Precondition("no reference profiles".into()))?;
        for p in profiles {
            check_same_layout(first, p)?;
        }
        let matrix: Vec<Vec<f64>> = profiles.iter().map(|p| p.values.clone()).collect();
        let c = first_component(&matrix, opts)?;
        Ok(Self {
            model_ids: profiles.iter().map(|p| p.model_id.clone()).collect(),
            matrix,
            column_means: c.column_means,
            axis: c.axis,
            scores: c.scores,
            layout_version: first.layout_version.clone(),
            text_ids: first.text_ids.clone(),
            lengths: first.lengths.clone(),
        })
    }

    pub fn score_new_model(&self, profile: &AccuracyProfile) -> Result<f64, AnalysisError> {
        project(
            &self.layout_version,
            &self.text_ids,
            &self.lengths,
            &self.column_means,
            &self.axis,
            profile,
        )
    }
}

fn project(
    layout_version: &str,
    text_ids: &[String],
    lengths: &[usize],
    means: &[f64],
    axis: &[f64],
    profile: &AccuracyProfile,
) -> Result<f64, AnalysisError> {
    if profile.layout_version != layout_version
        || profile.text_ids != text_ids
        || profile.lengths != lengths
        || profile.values.len() != axis.len()
    {
        return Err(AnalysisError::Compatibility(format!(
            "profile {} ({} values, layout {}) does not match the fitted axis ({} values, layout {})",
            profile.model_id,
            profile.values.len(),
            profile.layout_version,
            axis.len(),
            layout_version
        )));
    }
    Ok(profile.values.iter().zip(means).zip(axis).map(|((x, m), a)| (x - m) * a).sum())
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingLawFit {
    pub A: f64,
    pub B: f64,
    pub r_squared: f64,
    pub reference_ids: Vec<String>,
}

impl ScalingLawFit {
    pub fn predict(&self, z: f64) -> f64 {
        predict_size(self, z)
    }
}

/// Least-squares line through `(z, ln size)`.
pub fn fit_scaling_law(z: &[f64], sizes: &[f64], reference_ids: &[String]) -> Result<ScalingLawFit, AnalysisError> {
    let n = z.len();
    if n < 3 || sizes.len() != n {
        return Err(AnalysisError::Fit(format!("need at least 3 paired references, got {n}")));
    }
    if let Some(bad) = sizes.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(AnalysisError::Fit(format!("reference size must be positive, got {bad}")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite("latent scores".into()));
    }
    let y: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let nf = n as f64;
    let zm = z.iter().sum::<f64>() / nf;
    let ym = y.iter().sum::<f64>() / nf;
    let sxx: f64 = z.iter().map(|v| (v - zm).powi(2)).sum();
    let spread = z.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= (1e-12 * spread).powi(2) * nf {
        return Err(AnalysisError::Fit("latent scores are all equal".into()));
    }
    let sxy: f64 = z.iter().zip(&y).map(|(a, b)| (a - zm) * (b - ym)).sum();
    let b = sxy / sxx;
    let c = ym - b * zm;
    let ss_tot: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
    let ss_res: f64 = z.iter().zip(&y).map(|(a, v)| (v - (c + b * a)).powi(2)).sum();
    let r_squared = if ss_tot <= f64::EPSILON * ym.abs().max(1.0) * nf {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(ScalingLawFit {
        A: c.exp(),
        B: b,
        r_squared,
        reference_ids: reference_ids.to_vec(),
    })
}

pub fn predict_size(fit: &ScalingLawFit, z: f64) -> f64 {
    fit.A * (fit.B * z).exp()
}

pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub model_id: String,
    pub z: f64,
    pub abs_size: f64,
    pub abs_lb: u64,
}

/// Halve the point estimate to absorb the factor-of-two error band.
pub fn absolute_lower_bound(model_id: &str, z: f64, abs_size: f64) -> SizeEstimate {
    SizeEstimate {
        model_id: model_id.to_owned(),
        z,
        abs_size,
        abs_lb: round_half_up(0.5 * abs_size),
    }
}

/// Everything needed to score new profiles without the reference caches.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub layout_version: String,
    pub text_ids: Vec<String>,
    pub lengths: Vec<usize>,
    pub column_means: Vec<f64>,
    pub axis: Vec<f64>,
    pub A: f64,
    pub B: f64,
    pub r_squared: f64,
    pub reference_ids: Vec<String>,
    pub reference_scores: Vec<f64>,
}

impl FitArtifact {
    pub fn new(set: &LatentModelSet, fit: &ScalingLawFit) -> Self {
        Self {
            layout_version: set.layout_version.clone(),
            text_ids: set.text_ids.clone(),
            lengths: set.lengths.clone(),
            column_means: set.column_means.clone(),
            axis: set.axis.clone(),
            A: fit.A,
            B: fit.B,
            r_squared: fit.r_squared,
            reference_ids: fit.reference_ids.clone(),
            reference_scores: set.scores.clone(),
        }
    }

    pub fn law(&self) -> ScalingLawFit {
        ScalingLawFit {
            A: self.A,
            B: self.B,
            r_squared: self.r_squared,
            reference_ids: self.reference_ids.clone(),
        }
    }

    pub fn score(&self, profile: &AccuracyProfile) -> Result<f64, AnalysisError> {
        project(
            &self.layout_version,
            &self.text_ids,
            &self.lengths,
            &self.column_means,
            &self.axis,
            profile,
        )
    }

    pub fn estimate(&self, profile: &AccuracyProfile) -> Result<SizeEstimate, AnalysisError> {
        let z = self.score(profile)?;
        Ok(absolute_lower_bound(&profile.model_id, z, predict_size(&self.law(), z)))
    }
}

/// Fit the axis and the scaling law on a set of dense references.
pub fn calibrate(
    profiles: &[&AccuracyProfile],
    sizes: &[f64],
    opts: &PcaOptions,
) -> Result<(LatentModelSet, ScalingLawFit), AnalysisError> {
    let set = LatentModelSet::fit(profiles, opts)?;
    let fit = fit_scaling_law(&set.scores, sizes, &set.model_ids)?;
    Ok((set, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooPrediction {
    pub model_id: String,
    pub true_size: f64,
    pub z: f64,
    pub predicted: f64,
}

impl LooPrediction {
    pub fn ratio_error(&self) -> f64 {
        (self.predicted / self.true_size).max(self.true_size / self.predicted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooSummary {
    pub predictions: Vec<LooPrediction>,
    pub cv_r_squared: f64,
    pub max_ratio_error: f64,
    pub within_factor_two: f64,
}

/// Leave-one-out: the axis, centering and law are all refitted without the
/// held-out model.
pub fn loo_cv(profiles: &[&AccuracyProfile], sizes: &[f64], opts: &PcaOptions) -> Result<LooSummary, AnalysisError> {
    let n = profiles.len();
    if n < 4 || sizes.len() != n {
        return Err(AnalysisError::Precondition(format!("leave-one-out needs at least 4 references, got {n}")));
    }
    let predictions = (0..n)
        .into_par_iter()
        .map(|held| {
            let train: Vec<&AccuracyProfile> = (0..n).filter(|&i| i != held).map(|i| profiles[i]).collect();
            let train_sizes: Vec<f64> = (0..n).filter(|&i| i != held).map(|i| sizes[i]).collect();
            let (set, fit) = calibrate(&train, &train_sizes, opts)?;
            let z = set.score_new_model(profiles[held])?;
            Ok(LooPrediction {
                model_id: profiles[held].model_id.clone(),
                true_size: sizes[held],
                z,
                predicted: predict_size(&fit, z),
            })
        })
        .collect::<Result<Vec<_>, AnalysisError>>()?;

    let y: Vec<f64> = sizes.iter().map(|s| s.ln()).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - ym).powi(2)).sum();
    let ss_res: f64 = predictions.iter().zip(&y).map(|(p, v)| (v - p.predicted.ln()).powi(2)).sum();
    let cv_r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    let max_ratio_error = predictions.iter().map(LooPrediction::ratio_error).fold(1.0, f64::max);
    let within = predictions.iter().filter(|p| p.ratio_error() <= 2.0).count();
    Ok(LooSummary {
        within_factor_two: within as f64 / n as f64,
        predictions,
        cv_r_squared,
        max_ratio_error,
    })
}
