//! Seeded token sampling: temperature, top-k, top-p, inverse-CDF draw.
//!
//! The random source is SplitMix64 (Steele, Lea, Flood 2014), chosen because it
//! is a few lines in any language. Each sampling call consumes exactly one
//! 64-bit output, so runs that differ only in guidance stay on the same
//! random stream. The reference sequence for seed 42 is in the README.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64 generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub top_p: Option<f64>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            top_p: None,
            seed: 42,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(seed: u64) -> Self {
        Self {
            top_k: Some(1),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::input(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::input("top_k must be >= 1"));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::input(format!("top_p must be in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> Result<u32> {
    if logits.is_empty() {
        return Err(Error::input("argmax of an empty vector"));
    }
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    Ok(best as u32)
}

/// Post-filter distribution over the surviving tokens, as `(token, prob)` in index order.
pub fn filtered_distribution(logits: &[f32], cfg: &SamplerConfig) -> Result<Vec<(u32, f64)>> {
    cfg.validate()?;
    if logits.is_empty() {
        return Err(Error::input("cannot sample from an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::input("logits are not finite"));
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z as f64 / cfg.temperature).collect();

    // Descending by logit, ties to the lower index.
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
    if let Some(k) = cfg.top_k {
        order.truncate(k.min(order.len()));
    }

    let max = scaled[order[0]];
    let mut probs: Vec<f64> = order.iter().map(|&i| (scaled[i] - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);

    if let Some(top_p) = cfg.top_p.filter(|&p| p < 1.0) {
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (n, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= top_p {
                keep = n + 1;
                break;
            }
        }
        order.truncate(keep);
        probs.truncate(keep);
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
    }

    let mut kept: Vec<(u32, f64)> = order.into_iter().zip(probs).map(|(i, p)| (i as u32, p)).collect();
    kept.sort_by_key(|&(i, _)| i);
    Ok(kept)
}

/// Draws one token. Always consumes exactly one value from `rng`.
pub fn sample(logits: &[f32], cfg: &SamplerConfig, rng: &mut SplitMix64) -> Result<u32> {
    let u = rng.next_f64();
    let kept = filtered_distribution(logits, cfg)?;
    let mut cum = 0.0;
    for &(token, p) in &kept {
        cum += p;
        if u < cum {
            return Ok(token);
        }
    }
    kept.iter()
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|&(t, _)| t)
        .ok_or_else(|| Error::input("no token survived filtering"))
}
