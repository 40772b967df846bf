//! The guided decoding loop.
//!
//! Per step `t`: conditional forward; confidence weights from the recorded
//! `p_max` values, optionally step-normalized; unconditional forward with the
//! value cache transiently scaled by those weights; combine; sample; record
//! the new token's confidence. Both stored caches only ever hold unscaled
//! keys and values.

use crate::diagnostics::{self, StepTrace};
use crate::error::Result;
use crate::guidance::{self, GuidanceConfig, GuidanceMode, WeightVector};
use crate::model::{self, BranchCache, ModelParams};
use crate::sampler::{self, SamplerConfig, SplitMix64};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationOptions {
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    /// Records this value instead of the measured confidence at every step.
    pub confidence_override: Option<f64>,
}

impl GenerationOptions {
    pub fn new(guidance: GuidanceConfig, sampler: SamplerConfig) -> Self {
        Self {
            guidance,
            sampler,
            confidence_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.sampler.validate()?;
        if let Some(p) = self.confidence_override {
            if !(0.0..=1.0).contains(&p) {
                return Err(crate::Error::input(format!("confidence override {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub class_id: usize,
    pub tokens: Vec<u32>,
    pub traces: Vec<StepTrace>,
}

/// Everything computed at one step, handed to an observer.
pub struct StepView<'a> {
    pub step: usize,
    pub gamma_t: f64,
    pub z_cond: &'a [f32],
    pub z_uncond: &'a [f32],
    /// Equals `z_uncond` unless the mode is SoftCFG.
    pub z_uncond_pert: &'a [f32],
    pub z_guided: &'a [f32],
    /// Weights applied to the generated positions of the unconditional cache.
    pub weights: &'a WeightVector,
    /// Unconditional cache right after this step's forward.
    pub uncond_cache: &'a BranchCache,
    pub cond_cache: &'a BranchCache,
    pub trace: &'a StepTrace,
}

pub fn generate(
    params: &ModelParams,
    class_id: usize,
    opts: &GenerationOptions,
    rng: &mut SplitMix64,
) -> Result<Generation> {
    generate_observed(params, class_id, opts, rng, |_| {})
}

pub fn generate_observed<F>(
    params: &ModelParams,
    class_id: usize,
    opts: &GenerationOptions,
    rng: &mut SplitMix64,
    mut observer: F,
) -> Result<Generation>
where
    F: FnMut(&StepView<'_>),
{
    opts.validate()?;
    let g = &opts.guidance;
    let total = params.config.grid_len();
    let seeded = model::init_caches(params, class_id)?;
    let mut cond = seeded.cond;
    let mut uncond = seeded.uncond;
    let mut z_cond = seeded.cond_logits;
    let mut z_uncond = seeded.uncond_logits;
    let mut z_pert = z_uncond.clone();
    let mut weights = initial_weights(g);

    let mut tokens = Vec::with_capacity(total);
    let mut traces = Vec::with_capacity(total);

    for t in 1..=total {
        if t > 1 {
            let prev = tokens[t - 2];
            z_cond = model::forward_step(&mut cond, prev, params)?;
            match g.mode {
                GuidanceMode::None | GuidanceMode::Cfg => {
                    z_uncond = model::forward_step(&mut uncond, prev, params)?;
                    z_pert.clone_from(&z_uncond);
                    weights = WeightVector::identity(uncond.len() - 1);
                }
                GuidanceMode::SoftCfg => {
                    weights = guidance::confidence_weights(uncond.confidences())?;
                    if g.step_norm {
                        weights = guidance::step_normalize(&weights, g.epsilon)?;
                    }
                    let dual = model::forward_step_dual(&mut uncond, prev, params, &weights.to_scale())?;
                    z_uncond = dual.plain;
                    z_pert = dual.scaled;
                }
            }
        }

        let gamma_t = match g.mode {
            GuidanceMode::None => 0.0,
            _ => g.gamma_at(t, total)?,
        };
        let z_guided = match g.mode {
            GuidanceMode::None => z_cond.clone(),
            GuidanceMode::Cfg => guidance::combine_cfg(&z_cond, &z_uncond, gamma_t)?,
            GuidanceMode::SoftCfg => guidance::combine_softcfg(&z_cond, &z_pert, gamma_t)?,
        };
        let token = sampler::sample(&z_guided, &opts.sampler, rng)?;

        let dist_cond = tensor::softmax(&z_cond)?;
        let dist_uncond = tensor::softmax(&z_uncond)?;
        let dist_pert = tensor::softmax(&z_pert)?;
        let dist_guided = tensor::softmax(&z_guided)?;
        let p_max = opts
            .confidence_override
            .unwrap_or_else(|| guidance::extract_confidence(&dist_cond, &dist_uncond, &dist_guided, token, g));
        model::record_confidence(&mut cond, p_max)?;
        model::record_confidence(&mut uncond, p_max)?;

        let entropy_cond = diagnostics::normalized_entropy(&dist_cond)?;
        let entropy_uncond = diagnostics::normalized_entropy(&dist_uncond)?;
        let (_, delta_norm) = guidance::delta_context(&z_pert, &z_uncond)?;
        let report =
            diagnostics::cache_perturbation_report(uncond.generated_value_norms(), &weights, weights.is_normalized())?;
        let trace = StepTrace {
            step: t,
            gamma_t,
            entropy_cond,
            entropy_uncond,
            entropy_uncond_pert: diagnostics::normalized_entropy(&dist_pert)?,
            entropy_guided: diagnostics::normalized_entropy(&dist_guided)?,
            guidance_gap: diagnostics::guidance_gap(entropy_cond, entropy_uncond),
            delta_context_norm: delta_norm,
            perturbation_budget: weights.budget(),
            value_norm_max: report.value_norm_max,
            cache_perturbation_norm: report.total,
            p_max_recorded: p_max,
            sampled_token: token,
        };
        observer(&StepView {
            step: t,
            gamma_t,
            z_cond: &z_cond,
            z_uncond: &z_uncond,
            z_uncond_pert: &z_pert,
            z_guided: &z_guided,
            weights: &weights,
            uncond_cache: &uncond,
            cond_cache: &cond,
            trace: &trace,
        });
        tokens.push(token);
        traces.push(trace);
    }

    Ok(Generation {
        class_id,
        tokens,
        traces,
    })
}

fn initial_weights(g: &GuidanceConfig) -> WeightVector {
    let empty = WeightVector::identity(0);
    if g.mode == GuidanceMode::SoftCfg && g.step_norm {
        guidance::step_normalize(&empty, g.epsilon).expect("epsilon validated")
    } else {
        empty
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::weights_io::random_checkpoint;

    fn run(opts: &GenerationOptions, class_id: usize, seed: u64) -> Generation {
        let p = random_checkpoint(&ModelConfig::toy(), 42).unwrap();
        generate(&p, class_id, opts, &mut SplitMix64::new(seed)).unwrap()
    }

    #[test]
    fn produces_a_full_grid_with_traces() {
        let g = run(
            &GenerationOptions::new(GuidanceConfig::softcfg(3.0, true), SamplerConfig::default()),
            1,
            5,
        );
        assert_eq!(g.tokens.len(), 64);
        assert_eq!(g.traces.len(), 64);
        assert!(g.tokens.iter().all(|&t| t < 16));
        for (i, tr) in g.traces.iter().enumerate() {
            assert_eq!(tr.step, i + 1);
            assert_eq!(tr.sampled_token, g.tokens[i]);
            for h in [
                tr.entropy_cond,
                tr.entropy_uncond,
                tr.entropy_uncond_pert,
                tr.entropy_guided,
            ] {
                assert!((0.0..=1.0).contains(&h));
            }
            assert!((0.0..=1.0).contains(&tr.perturbation_budget));
            assert!(tr.cache_perturbation_norm <= tr.value_norm_max + 1e-5);
        }
        assert_eq!(g.traces[0].delta_context_norm, 0.0);
    }

    #[test]
    fn cfg_gamma_zero_matches_none() {
        let s = SamplerConfig::default();
        let a = run(&GenerationOptions::new(GuidanceConfig::none(), s), 2, 9);
        let b = run(&GenerationOptions::new(GuidanceConfig::cfg(0.0), s), 2, 9);
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn zero_confidence_softcfg_matches_cfg() {
        let s = SamplerConfig::default();
        let cfg = run(&GenerationOptions::new(GuidanceConfig::cfg(4.0), s), 0, 3);
        let mut opts = GenerationOptions::new(GuidanceConfig::softcfg(4.0, true), s);
        opts.confidence_override = Some(0.0);
        let soft = run(&opts, 0, 3);
        assert_eq!(cfg.tokens, soft.tokens);
        assert!(soft.traces.iter().all(|t| t.delta_context_norm == 0.0));
    }

    #[test]
    fn stored_caches_agree_across_modes_for_equal_tokens() {
        // With forced tokens (greedy on an identical prefix), the unconditional
        // cache of a SoftCFG run must equal the one of a plain run.
        let p = random_checkpoint(&ModelConfig::toy(), 42).unwrap();
        let opts = GenerationOptions::new(GuidanceConfig::softcfg(2.0, true), SamplerConfig::default());
        let mut last_soft = None;
        let g = generate_observed(&p, 1, &opts, &mut SplitMix64::new(1), |v| {
            if v.step == 64 {
                last_soft = Some(v.uncond_cache.clone());
            }
        })
        .unwrap();
        let soft_cache = last_soft.unwrap();
        let mut plain = model::init_caches(&p, 1).unwrap().uncond;
        for &tok in &g.tokens[..63] {
            model::forward_step(&mut plain, tok, &p).unwrap();
        }
        assert_eq!(soft_cache.layer_values(0), plain.layer_values(0));
        assert_eq!(soft_cache.layer_values(1), plain.layer_values(1));
        assert_eq!(soft_cache.layer_keys(1), plain.layer_keys(1));
    }

    #[test]
    fn rejects_bad_options() {
        let p = random_checkpoint(&ModelConfig::toy(), 42).unwrap();
        let mut opts = GenerationOptions::new(GuidanceConfig::cfg(1.0), SamplerConfig::default());
        opts.confidence_override = Some(2.0);
        assert!(generate(&p, 0, &opts, &mut SplitMix64::new(0)).is_err());
        let opts = GenerationOptions::new(GuidanceConfig::cfg(1.0), SamplerConfig::default());
        assert!(generate(&p, 9, &opts, &mut SplitMix64::new(0)).is_err());
    }
}
