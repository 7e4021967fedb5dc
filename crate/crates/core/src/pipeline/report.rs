//! Lower-bound report: per-target combination of the two bounds.

use serde::{Deserialize, Serialize};

use crate::latent::{round_half_up, SizeEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundSource {
    Abs,
    Rel,
}

impl std::fmt::Display for BoundSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundSource::Abs => "Abs",
            BoundSource::Rel => "Rel",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBound {
    pub model_id: String,
    pub true_size: Option<f64>,
    pub best_lb: u64,
    pub source: BoundSource,
    pub abs_size: Option<f64>,
    pub abs_lb: Option<u64>,
    pub rel_lb: Option<f64>,
    /// Reference that produced `rel_lb`.
    pub rel_reference: Option<String>,
    pub tightness: Option<f64>,
}

pub const TIE_POLICY: &str = "equal absolute and relative bounds are attributed to Abs";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub targets: Vec<TargetBound>,
    pub notices: Vec<String>,
}

/// Take the larger of the two bounds.
///
/// The comparison uses the unrounded absolute bound `0.5 * abs_size`, so a
/// 17B point estimate (bound 8.5, shown as 9) loses to a 9B relative bound.
/// Exact ties go to Abs. The reported value is the rounded winner.
pub fn combine(
    model_id: &str,
    abs: Option<&SizeEstimate>,
    rel_lb: Option<f64>,
    rel_reference: Option<String>,
    true_size: Option<f64>,
) -> Option<TargetBound> {
    let (best_lb, source) = match (abs, rel_lb) {
        (None, None) => return None,
        (Some(a), None) => (a.abs_lb, BoundSource::Abs),
        (None, Some(r)) => (round_half_up(r), BoundSource::Rel),
        (Some(a), Some(r)) => {
            if 0.5 * a.abs_size >= r {
                (a.abs_lb, BoundSource::Abs)
            } else {
                (round_half_up(r), BoundSource::Rel)
            }
        }
    };
    Some(TargetBound {
        model_id: model_id.to_owned(),
        true_size,
        best_lb,
        source,
        abs_size: abs.map(|a| a.abs_size),
        abs_lb: abs.map(|a| a.abs_lb),
        rel_lb,
        rel_reference,
        tightness: true_size.map(|t| best_lb as f64 / t),
    })
}

/// Whole percent, ties to even (40.5% prints as 40).
pub fn tightness_pct(tightness: f64) -> u64 {
    (100.0 * tightness).round_ties_even() as u64
}

fn opt_int(v: Option<f64>) -> String {
    v.map(|x| round_half_up(x).to_string()).unwrap_or_default()
}

impl LowerBoundReport {
    /// One row per target in report order. Missing values are empty fields.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "model_id",
            "size",
            "best_lb",
            "tightness_pct",
            "source",
            "abs_size",
            "abs_lb",
            "rel_lb",
            "rel_reference",
        ])?;
        for t in &self.targets {
            out.write_record([
                t.model_id.clone(),
                opt_int(t.true_size),
                t.best_lb.to_string(),
                t.tightness.map(|x| tightness_pct(x).to_string()).unwrap_or_default(),
                t.source.to_string(),
                opt_int(t.abs_size),
                t.abs_lb.map(|x| x.to_string()).unwrap_or_default(),
                opt_int(t.rel_lb),
                t.rel_reference.clone().unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}
