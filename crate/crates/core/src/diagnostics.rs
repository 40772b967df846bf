//! Per-step measurements: normalized entropy, guidance gap, context deltas
//! and the value-cache perturbation bound.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::WeightVector;
use crate::tensor::TokenDistribution;

/// Slack allowed on the unit-budget bound `Σ(1−ŵ_i)‖v_i‖ ≤ max_i ‖v_i‖`.
pub const BOUND_TOLERANCE: f64 = 1e-5;

/// Diagnostics for one generated token. Field order is the on-disk column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub gamma_t: f64,
    pub entropy_cond: f64,
    pub entropy_uncond: f64,
    pub entropy_uncond_pert: f64,
    pub entropy_guided: f64,
    /// `entropy_uncond − entropy_cond`
    pub guidance_gap: f64,
    pub delta_context_norm: f64,
    /// `Σ(1 − ŵ_i)` of the weights applied this step.
    pub perturbation_budget: f64,
    /// `max_i ‖v_i‖` over generated positions of the unconditional cache.
    pub value_norm_max: f64,
    /// `Σ(1 − ŵ_i)‖v_i‖`
    pub cache_perturbation_norm: f64,
    pub p_max_recorded: f64,
    pub sampled_token: u32,
}

impl StepTrace {
    pub const FIELDS: [&'static str; 13] = [
        "step",
        "gamma_t",
        "entropy_cond",
        "entropy_uncond",
        "entropy_uncond_pert",
        "entropy_guided",
        "guidance_gap",
        "delta_context_norm",
        "perturbation_budget",
        "value_norm_max",
        "cache_perturbation_norm",
        "p_max_recorded",
        "sampled_token",
    ];

    fn values(&self) -> [String; 13] {
        [
            self.step.to_string(),
            self.gamma_t.to_string(),
            self.entropy_cond.to_string(),
            self.entropy_uncond.to_string(),
            self.entropy_uncond_pert.to_string(),
            self.entropy_guided.to_string(),
            self.guidance_gap.to_string(),
            self.delta_context_norm.to_string(),
            self.perturbation_budget.to_string(),
            self.value_norm_max.to_string(),
            self.cache_perturbation_norm.to_string(),
            self.p_max_recorded.to_string(),
            self.sampled_token.to_string(),
        ]
    }
}

/// A trace line as written to disk: which sample it belongs to, then the step fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample: usize,
    pub class_id: usize,
    #[serde(flatten)]
    pub trace: StepTrace,
}

/// `H(p) / log V` with natural logs and `0·log 0 = 0`.
pub fn normalized_entropy(p: &TokenDistribution) -> Result<f64> {
    let v = p.len();
    if v < 2 {
        return Err(Error::input(format!(
            "normalized entropy needs at least 2 outcomes, got {v}"
        )));
    }
    let h: f64 = p
        .probs()
        .iter()
        .filter(|&&q| q > 0.0)
        .map(|&q| -q * q.ln())
        .fold(0.0, |acc, x| acc + x);
    Ok((h / (v as f64).ln()).clamp(0.0, 1.0))
}

/// `entropy_pert − entropy_base`
pub fn guidance_gap(entropy_base: f64, entropy_pert: f64) -> f64 {
    entropy_pert - entropy_base
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationReport {
    /// `(1 − ŵ_i)·‖v_i‖` per generated position.
    pub per_token: Vec<f64>,
    pub total: f64,
    pub value_norm_max: f64,
    /// `Some(total ≤ max‖v‖ + tol)` when the bound was checked.
    pub bound_ok: Option<bool>,
}

/// Size of the value-cache perturbation implied by `weights`.
///
/// Since `ṽ_i − v_i = (ŵ_i − 1)·v_i`, the per-token norm is exactly
/// `(1 − ŵ_i)‖v_i‖`; the total is the triangle-inequality bound on the whole
/// cache difference. With `check_bound`, weights must be step-normalized.
pub fn cache_perturbation_report(
    value_norms: &[f64],
    weights: &WeightVector,
    check_bound: bool,
) -> Result<PerturbationReport> {
    if value_norms.len() != weights.len() {
        return Err(Error::input(format!(
            "{} value norms for {} weights",
            value_norms.len(),
            weights.len()
        )));
    }
    if check_bound && !weights.is_normalized() {
        return Err(Error::input("bound check requires step-normalized weights"));
    }
    let per_token: Vec<f64> = value_norms
        .iter()
        .zip(weights.weights())
        .map(|(n, w)| (1.0 - w) * n)
        .collect();
    let total = per_token.iter().fold(0.0, |acc, x| acc + x);
    let value_norm_max = value_norms.iter().copied().fold(0.0, f64::max);
    let bound_ok = check_bound.then_some(total <= value_norm_max + BOUND_TOLERANCE);
    Ok(PerturbationReport {
        per_token,
        total,
        value_norm_max,
        bound_ok,
    })
}

/// One JSON object per line.
pub fn write_jsonl<W: Write>(mut out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<TraceRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(format!("trace line {}: {e}", i + 1))))
        .collect()
}

/// CSV with `sample,class_id` followed by [`StepTrace::FIELDS`].
pub fn write_csv<W: Write>(out: W, records: &[TraceRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample", "class_id"];
    header.extend(StepTrace::FIELDS);
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.sample.to_string(), r.class_id.to_string()];
        row.extend(r.trace.values());
        w.write_record(&row)?;
    }
    w.flush()
}
