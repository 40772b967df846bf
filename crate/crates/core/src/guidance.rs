//! Guidance mathematics over plain logit vectors.
//!
//! Combination follows the `(1 + γ_t)·z_cond − γ_t·z_uncond` form, so
//! `γ_t = 0` is pure conditional decoding. SoftCFG substitutes the
//! context-perturbed unconditional logits into the same form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TokenDistribution;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Conditional branch only.
    None,
    Cfg,
    #[serde(alias = "soft_cfg", alias = "soft-cfg")]
    SoftCfg,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Cfg => "cfg",
            GuidanceMode::SoftCfg => "softcfg",
        }
    }
}

impl std::str::FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "cfg" => Ok(Self::Cfg),
            "softcfg" | "soft_cfg" | "soft-cfg" => Ok(Self::SoftCfg),
            other => Err(Error::input(format!("unknown guidance mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// `γ_t = (γ − 1)·½(1 − cos((t/T)^k π))`
    Cosine {
        k: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceSource {
    Conditional,
    Unconditional,
    Guided,
}

impl std::str::FromStr for ConfidenceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "conditional" | "cond" => Ok(Self::Conditional),
            "unconditional" | "uncond" => Ok(Self::Unconditional),
            "guided" => Ok(Self::Guided),
            other => Err(Error::input(format!("unknown confidence source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceStat {
    /// Maximum probability over the vocabulary.
    MaxProb,
    /// Probability the source distribution gave the sampled token.
    SampledTokenProb,
}

impl std::str::FromStr for ConfidenceStat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "max_prob" => Ok(Self::MaxProb),
            "sampled_token_prob" => Ok(Self::SampledTokenProb),
            other => Err(Error::input(format!("unknown confidence statistic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub schedule: Schedule,
    pub step_norm: bool,
    pub epsilon: f64,
    pub confidence_source: ConfidenceSource,
    pub confidence_stat: ConfidenceStat,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceMode::SoftCfg,
            gamma: 3.0,
            schedule: Schedule::Constant,
            step_norm: true,
            epsilon: DEFAULT_EPSILON,
            confidence_source: ConfidenceSource::Conditional,
            confidence_stat: ConfidenceStat::MaxProb,
        }
    }
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self {
            mode: GuidanceMode::None,
            gamma: 0.0,
            ..Self::default()
        }
    }

    pub fn cfg(gamma: f64) -> Self {
        Self {
            mode: GuidanceMode::Cfg,
            gamma,
            ..Self::default()
        }
    }

    pub fn softcfg(gamma: f64, step_norm: bool) -> Self {
        Self {
            mode: GuidanceMode::SoftCfg,
            gamma,
            step_norm,
            ..Self::default()
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::input(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::input(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let Schedule::Cosine { k } = self.schedule {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::input(format!("cosine exponent k must be > 0, got {k}")));
            }
        }
        Ok(())
    }

    /// Guidance scale at step `t` of `total`.
    pub fn gamma_at(&self, t: usize, total: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.gamma),
            Schedule::Cosine { k } => cosine_gamma(t, total, self.gamma, k),
        }
    }
}

/// Per-position value scales `w_i`, one per generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    w: Vec<f64>,
    normalized: bool,
}

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(bad) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("weight {bad} outside [0, 1]")));
        }
        Ok(Self { w, normalized: false })
    }

    /// All-ones weights: no perturbation.
    pub fn identity(len: usize) -> Self {
        Self {
            w: vec![1.0; len],
            normalized: false,
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Perturbation mass `Σ(1 − w_i)`.
    pub fn budget(&self) -> f64 {
        self.w.iter().map(|w| 1.0 - w).fold(0.0, |acc, x| acc + x)
    }

    /// The weights as model scale factors.
    pub fn to_scale(&self) -> Vec<f32> {
        self.w.iter().map(|&w| w as f32).collect()
    }
}

/// `w_i = 1 − p_max(x_i)`.
pub fn confidence_weights(confidences: &[f64]) -> Result<WeightVector> {
    if let Some(bad) = confidences.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::input(format!("confidence {bad} outside [0, 1]")));
    }
    Ok(WeightVector {
        w: confidences.iter().map(|p| 1.0 - p).collect(),
        normalized: false,
    })
}

/// Rescales `1 − w_i` by the total mass plus `epsilon`, giving a budget of `S / (S + ε)`.
pub fn step_normalize(w: &WeightVector, epsilon: f64) -> Result<WeightVector> {
    if w.normalized {
        return Err(Error::input("weights are already step-normalized"));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::input(format!("epsilon must be > 0, got {epsilon}")));
    }
    let denom = w.budget() + epsilon;
    Ok(WeightVector {
        w: w.w.iter().map(|wi| 1.0 - (1.0 - wi) / denom).collect(),
        normalized: true,
    })
}

fn affine(z_cond: &[f32], z_other: &[f32], gamma_t: f64) -> Result<Vec<f32>> {
    if z_cond.len() != z_other.len() {
        return Err(Error::input(format!(
            "logit length mismatch: {} vs {}",
            z_cond.len(),
            z_other.len()
        )));
    }
    let a = 1.0 + gamma_t;
    Ok(z_cond
        .iter()
        .zip(z_other)
        .map(|(&c, &u)| (a * c as f64 - gamma_t * u as f64) as f32)
        .collect())
}

/// `(1 + γ_t)·z_cond − γ_t·z_uncond`
pub fn combine_cfg(z_cond: &[f32], z_uncond: &[f32], gamma_t: f64) -> Result<Vec<f32>> {
    affine(z_cond, z_uncond, gamma_t)
}

/// `(1 + γ_t)·z_cond − γ_t·z̃_uncond` with the context-perturbed unconditional logits.
pub fn combine_softcfg(z_cond: &[f32], z_uncond_pert: &[f32], gamma_t: f64) -> Result<Vec<f32>> {
    affine(z_cond, z_uncond_pert, gamma_t)
}

/// `Δ^context = z̃_uncond − z_uncond` and its L2 norm.
pub fn delta_context(z_uncond_pert: &[f32], z_uncond: &[f32]) -> Result<(Vec<f32>, f64)> {
    if z_uncond_pert.len() != z_uncond.len() {
        return Err(Error::input(format!(
            "logit length mismatch: {} vs {}",
            z_uncond_pert.len(),
            z_uncond.len()
        )));
    }
    let delta: Vec<f32> = z_uncond_pert.iter().zip(z_uncond).map(|(a, b)| a - b).collect();
    let norm = delta
        .iter()
        .map(|&d| (d as f64).powi(2))
        .fold(0.0, |acc, x| acc + x)
        .sqrt();
    Ok((delta, norm))
}

/// `γ_t = (γ − 1)·½(1 − cos((t/T)^k π))`
pub fn cosine_gamma(t: usize, total: usize, gamma: f64, k: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::input("total steps must be >= 1"));
    }
    if t > total {
        return Err(Error::input(format!("step {t} beyond total {total}")));
    }
    if k.is_nan() || k <= 0.0 {
        return Err(Error::input(format!("cosine exponent must be > 0, got {k}")));
    }
    let frac = (t as f64 / total as f64).powf(k);
    Ok((gamma - 1.0) * 0.5 * (1.0 - (frac * std::f64::consts::PI).cos()))
}

/// Confidence of the token just generated, per `cfg.confidence_source` and `cfg.confidence_stat`.
pub fn extract_confidence(
    dist_cond: &TokenDistribution,
    dist_uncond: &TokenDistribution,
    dist_guided: &TokenDistribution,
    sampled: u32,
    cfg: &GuidanceConfig,
) -> f64 {
    let source = match cfg.confidence_source {
        ConfidenceSource::Conditional => dist_cond,
        ConfidenceSource::Unconditional => dist_uncond,
        ConfidenceSource::Guided => dist_guided,
    };
    let p = match cfg.confidence_stat {
        ConfidenceStat::MaxProb => source.max_prob(),
        ConfidenceStat::SampledTokenProb => source.prob(sampled as usize),
    };
    p.clamp(0.0, 1.0)
}
