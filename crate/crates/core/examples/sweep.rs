//! A small (gamma, k) sweep through the same code path as the `sweep` command.
//!
//! cargo run --release --example sweep

use guided_decode::run::{cmd_sweep, ManifestOverrides};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("guided-decode-sweep");
    let manifest = ManifestOverrides::from_toml(&format!(
        "random_seed = 42\nsamples_per_class = 4\nmode = \"softcfg\"\noutput_dir = {:?}\n",
        dir.display().to_string()
    ))?
    .into_manifest()?;
    let rows = cmd_sweep(&manifest, &[1.0, 2.0, 4.0], &[1.0, 2.0])?;
    println!(
        "{:>5} {:>4} {:>8} {:>8} {:>9}",
        "gamma", "k", "acc", "valid", "H_guided"
    );
    for r in rows {
        println!(
            "{:>5} {:>4} {:>8.3} {:>8.3} {:>9.4}",
            r.gamma, r.k, r.class_accuracy, r.validity_rate, r.mean_guided_entropy
        );
    }
    println!("csv: {}", dir.join("sweep.csv").display());
    Ok(())
}
