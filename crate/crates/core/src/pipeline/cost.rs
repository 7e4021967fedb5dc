//! Query and token accounting before a run.
//!
//! Tokens are approximated as one per four characters of rendered prompt,
//! which is close enough for budgeting across common tokenizers.

use serde::Serialize;

use crate::client::prompt::PLACEHOLDER;
use crate::corpus::eligible_positions;
use crate::error::Result;

use super::measure::plan_samples;
use super::Workspace;

const CHARS_PER_TOKEN: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelCost {
    pub model_id: String,
    pub queries: u64,
    pub prompt_tokens: u64,
    /// Upper bound from the output cap.
    pub max_output_tokens: u64,
    pub simulated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub queries_per_model: u64,
    pub mean_prompt_tokens: f64,
    pub models: Vec<ModelCost>,
    pub live_queries: u64,
    pub live_prompt_tokens: u64,
}

/// Queries one model needs: every sampled position times every template.
pub fn queries_per_model(ws: &Workspace) -> u64 {
    let plan = ws.config.sampling_plan();
    let per_template: usize = ws
        .corpus
        .docs()
        .iter()
        .flat_map(|d| {
            plan.lengths
                .iter()
                .map(move |&l| eligible_positions(d, l).count().min(plan.samples_per_length))
        })
        .sum();
    (per_template * ws.templates.len()) as u64
}

fn template_overhead_chars(ws: &Workspace) -> f64 {
    let total: usize = ws
        .templates
        .iter()
        .map(|t| t.system_text.as_ref().map_or(0, |s| s.chars().count()) + t.user_text.chars().count() - PLACEHOLDER.len())
        .sum();
    total as f64 / ws.templates.len() as f64
}

/// Expected tokens per prompt from mean word length and mean prefix length.
pub fn mean_prompt_tokens(ws: &Workspace) -> f64 {
    let (mut chars, mut words) = (0usize, 0usize);
    for d in ws.corpus.docs() {
        for t in d.tokens() {
            chars += t.chars().count();
            words += 1;
        }
    }
    let mean_word = if words == 0 { 0.0 } else { chars as f64 / words as f64 };
    let plan = ws.config.sampling_plan();
    let (mut weighted, mut count) = (0.0, 0usize);
    for d in ws.corpus.docs() {
        for &l in &plan.lengths {
            let n = eligible_positions(d, l).count().min(plan.samples_per_length);
            weighted += n as f64 * (l as f64 * (mean_word + 1.0) - 1.0);
            count += n;
        }
    }
    let prefix = if count == 0 { 0.0 } else { weighted / count as f64 };
    (prefix + template_overhead_chars(ws)) / CHARS_PER_TOKEN
}

pub fn estimate_cost(ws: &Workspace) -> CostEstimate {
    let q = queries_per_model(ws);
    let mean = mean_prompt_tokens(ws);
    let max_out = u64::from(ws.config.client.max_tokens);
    let models: Vec<ModelCost> = ws
        .config
        .models
        .iter()
        .map(|m| ModelCost {
            model_id: m.model_id.clone(),
            queries: q,
            prompt_tokens: (q as f64 * mean).round() as u64,
            max_output_tokens: q * max_out,
            simulated: m.simulated.is_some(),
        })
        .collect();
    let live: Vec<&ModelCost> = models.iter().filter(|m| !m.simulated).collect();
    CostEstimate {
        queries_per_model: q,
        mean_prompt_tokens: mean,
        live_queries: live.iter().map(|m| m.queries).sum(),
        live_prompt_tokens: live.iter().map(|m| m.prompt_tokens).sum(),
        models,
    }
}

/// Render every prompt one model would receive and count its tokens.
pub fn dry_run_prompt_tokens(ws: &Workspace) -> Result<(u64, f64)> {
    let mut queries = 0u64;
    let mut chars = 0usize;
    for (_, per_length) in plan_samples(ws)? {
        for ls in per_length {
            for s in &ls.samples {
                for t in &ws.templates {
                    let r = t.render(&s.prefix);
                    chars += r.system.as_ref().map_or(0, |x| x.chars().count()) + r.user.chars().count();
                    queries += 1;
                }
            }
        }
    }
    Ok((queries, chars as f64 / CHARS_PER_TOKEN))
}
