//! Same seeds, three guidance modes, side by side.
//!
//! cargo run --example cfg_vs_softcfg

use guided_decode::grammar;
use guided_decode::weights_io::random_checkpoint;
use guided_decode::{generate, GenerationOptions, GuidanceConfig, ModelConfig, SamplerConfig, SplitMix64};

fn main() -> guided_decode::Result<()> {
    let params = random_checkpoint(&ModelConfig::toy(), 42)?;
    let sampler = SamplerConfig::default();
    let modes = [
        ("none", GuidanceConfig::none()),
        ("cfg", GuidanceConfig::cfg(3.0)),
        ("softcfg", GuidanceConfig::softcfg(3.0, true)),
    ];
    for (name, guidance) in modes {
        let opts = GenerationOptions::new(guidance, sampler);
        let mut grids = Vec::new();
        let mut delta = 0.0;
        for i in 0..16u64 {
            let class = (i % 4) as usize;
            let g = generate(&params, class, &opts, &mut SplitMix64::new(sampler.seed + i))?;
            delta += g.traces.iter().map(|t| t.delta_context_norm).sum::<f64>() / 64.0;
            grids.push((g.tokens, class));
        }
        let batch = || grids.iter().map(|(t, c)| (t.as_slice(), *c));
        println!(
            "{name:<8} accuracy {:.3}  validity {:.3}  mean |delta_context| {:.4}",
            grammar::class_accuracy(batch())?,
            grammar::validity_rate(batch())?,
            delta / 16.0
        );
    }
    println!("(random weights: the numbers show plumbing, not guidance quality)");
    Ok(())
}
