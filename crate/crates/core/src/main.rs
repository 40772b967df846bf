use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use guided_decode::run::{self, ManifestOverrides, RunManifest};

#[derive(Parser)]
#[command(
    name = "guided-decode",
    version,
    about = "Guided autoregressive decoding on a toy transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML file with manifest keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ManifestOverrides,
}

impl RunArgs {
    fn manifest(self) -> Result<RunManifest> {
        let base = match &self.config {
            Some(p) => ManifestOverrides::from_file(p)?,
            None => ManifestOverrides::default(),
        };
        Ok(base.overlay(self.flags).into_manifest()?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate grids, per-step traces and a summary.
    Generate(RunArgs),
    /// Evaluate a grid of (gamma, k) cosine schedules.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<f64>,
    },
    /// Per-step mean entropies and perturbation measures.
    Diagnose(RunArgs),
    /// Score a grid or dataset file.
    Eval { path: PathBuf },
    /// Print a checkpoint's manifest.
    InspectWeights { path: PathBuf },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let out = run::cmd_generate(&args.manifest()?)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
            eprintln!("wrote {}", out.grids_path.display());
            eprintln!("wrote {}", out.traces_path.display());
            eprintln!("wrote {}", out.summary_path.display());
        }
        Command::Sweep { run: args, gammas, ks } => {
            let m = args.manifest()?;
            let rows = run::cmd_sweep(&m, &gammas, &ks)?;
            for r in &rows {
                println!(
                    "gamma {:<6} k {:<5} acc {:.3} valid {:.3} H_guided {:.4} {:.0} ms",
                    r.gamma, r.k, r.class_accuracy, r.validity_rate, r.mean_guided_entropy, r.wall_ms
                );
            }
            eprintln!("wrote {}", m.output_dir.join(run::SWEEP_FILE).display());
        }
        Command::Diagnose(args) => {
            let m = args.manifest()?;
            let rows = run::cmd_diagnose(&m)?;
            println!("{} steps", rows.len());
            eprintln!("wrote {}", m.output_dir.join(run::DIAGNOSE_FILE).display());
        }
        Command::Eval { path } => {
            let report = run::cmd_eval(&path).with_context(|| format!("evaluating {}", path.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::InspectWeights { path } => print!("{}", run::cmd_inspect_weights(&path)?),
    }
    Ok(())
}
