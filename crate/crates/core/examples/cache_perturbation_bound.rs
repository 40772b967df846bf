//! Size of the value-cache perturbation per step, with and without step
//! normalization, on tokens forced to high confidence.
//!
//! cargo run --example cache_perturbation_bound

use guided_decode::weights_io::random_checkpoint;
use guided_decode::{generate, GenerationOptions, GuidanceConfig, ModelConfig, SamplerConfig, SplitMix64};

fn main() -> guided_decode::Result<()> {
    let params = random_checkpoint(&ModelConfig::toy(), 42)?;
    println!(
        "{:>4}  {:>10}  {:>12}  {:>12}",
        "step", "max ||v||", "normalized", "raw"
    );
    let mut runs = Vec::new();
    for step_norm in [true, false] {
        let mut opts = GenerationOptions::new(GuidanceConfig::softcfg(3.0, step_norm), SamplerConfig::default());
        opts.confidence_override = Some(0.95);
        runs.push(generate(&params, 1, &opts, &mut SplitMix64::new(7))?.traces);
    }
    for t in (1..64).step_by(7) {
        let (a, b) = (&runs[0][t], &runs[1][t]);
        println!(
            "{:>4}  {:>10.4}  {:>12.4}  {:>12.4}",
            a.step, a.value_norm_max, a.cache_perturbation_norm, b.cache_perturbation_norm
        );
    }
    let worst = runs[0]
        .iter()
        .map(|t| t.cache_perturbation_norm - t.value_norm_max)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("normalized: max(total - max||v||) = {worst:.2e} (never positive beyond rounding)");
    Ok(())
}
