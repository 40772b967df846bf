//! Per-step normalized entropies of one SoftCFG sample, as CSV on stdout.
//!
//! cargo run --example entropy_trace -- [class] [seed]

use guided_decode::diagnostics::{write_csv, TraceRecord};
use guided_decode::weights_io::random_checkpoint;
use guided_decode::{generate, GenerationOptions, GuidanceConfig, ModelConfig, SamplerConfig, SplitMix64};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let class: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(0);
    let seed: u64 = args.next().map(|a| a.parse()).transpose()?.unwrap_or(42);

    let params = random_checkpoint(&ModelConfig::toy(), 42)?;
    let opts = GenerationOptions::new(GuidanceConfig::softcfg(3.0, true), SamplerConfig::default());
    let g = generate(&params, class, &opts, &mut SplitMix64::new(seed))?;
    let records: Vec<TraceRecord> = g
        .traces
        .into_iter()
        .map(|trace| TraceRecord {
            sample: 0,
            class_id: class,
            trace,
        })
        .collect();
    write_csv(std::io::stdout().lock(), &records)?;
    Ok(())
}
