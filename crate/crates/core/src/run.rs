//! Run manifests and the command implementations behind the binary.
//!
//! A manifest is assembled from defaults, then an optional TOML config file,
//! then command-line flags. Every key has the same name in all three places.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, TraceRecord};
use crate::error::{Error, Result};
use crate::generate::{self, Generation, GenerationOptions};
use crate::grammar::{self, LabeledGrid};
use crate::guidance::{ConfidenceSource, ConfidenceStat, GuidanceConfig, GuidanceMode, Schedule};
use crate::model::{ModelConfig, ModelParams};
use crate::sampler::{SamplerConfig, SplitMix64};
use crate::weights_io::{self, Manifest};

pub const THREADS_ENV: &str = "GUIDED_DECODE_THREADS";
pub const GRIDS_FILE: &str = "grids.txt";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DIAGNOSE_FILE: &str = "diagnose.csv";

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    Checkpoint(PathBuf),
    /// `random_checkpoint` on the toy config with this seed.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassSelect {
    All,
    /// Listed ids, in output order.
    Ids(Vec<usize>),
}

impl FromStr for ClassSelect {
    type Err = Error;

    /// `all`, one id, or comma-separated ids.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        s.split(',')
            .map(|part| part.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Self::Ids)
            .map_err(|_| Error::input(format!("class must be ids or `all`, got `{s}`")))
    }
}

impl<'de> Deserialize<'de> for ClassSelect {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(usize),
            Ids(Vec<usize>),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(c) => Ok(Self::Ids(vec![c])),
            Raw::Ids(c) => Ok(Self::Ids(c)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::input(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub source: WeightSource,
    pub classes: ClassSelect,
    pub samples_per_class: usize,
    pub guidance: GuidanceConfig,
    pub sampler: SamplerConfig,
    pub output_dir: PathBuf,
}

/// Partial manifest: what a config file or a set of flags specifies.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ManifestOverrides {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub random_seed: Option<u64>,
    /// Class ids (comma-separated) or `all`.
    #[arg(long)]
    pub class: Option<ClassSelect>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,

    /// none, cfg or softcfg.
    #[arg(long)]
    pub mode: Option<GuidanceMode>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    /// Cosine exponent.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, action = clap::ArgAction::Set)]
    pub step_norm: Option<bool>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// conditional, unconditional or guided.
    #[arg(long)]
    pub confidence_source: Option<ConfidenceSource>,
    /// max_prob or sampled_token_prob.
    #[arg(long)]
    pub confidence_stat: Option<ConfidenceStat>,

    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($f:ident),*) => {
        ManifestOverrides { $($f: $top.$f.or($base.$f)),* }
    };
}

impl ManifestOverrides {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fields set in `top` win.
    pub fn overlay(self, top: Self) -> Self {
        let base = self;
        overlay!(base, top; checkpoint, random_seed, class, samples_per_class, output_dir,
            mode, gamma, schedule, k, step_norm, epsilon, confidence_source, confidence_stat,
            temperature, top_k, top_p, seed)
    }

    pub fn into_manifest(self) -> Result<RunManifest> {
        let source = match (self.checkpoint, self.random_seed) {
            (Some(p), None) => WeightSource::Checkpoint(p),
            (None, Some(s)) => WeightSource::Random(s),
            (Some(_), Some(_)) => return Err(Error::config("set either checkpoint or random_seed, not both")),
            (None, None) => return Err(Error::config("one of checkpoint or random_seed is required")),
        };
        let d = GuidanceConfig::default();
        let schedule = match (self.schedule.unwrap_or(ScheduleKind::Constant), self.k) {
            (ScheduleKind::Constant, None) => Schedule::Constant,
            (ScheduleKind::Constant, Some(_)) => {
                return Err(Error::config("k is only meaningful with schedule = cosine"))
            }
            (ScheduleKind::Cosine, Some(k)) => Schedule::Cosine { k },
            (ScheduleKind::Cosine, None) => return Err(Error::config("schedule = cosine needs k")),
        };
        let guidance = GuidanceConfig {
            mode: self.mode.unwrap_or(d.mode),
            gamma: self.gamma.unwrap_or(d.gamma),
            schedule,
            step_norm: self.step_norm.unwrap_or(d.step_norm),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            confidence_source: self.confidence_source.unwrap_or(d.confidence_source),
            confidence_stat: self.confidence_stat.unwrap_or(d.confidence_stat),
        };
        let s = SamplerConfig::default();
        let sampler = SamplerConfig {
            temperature: self.temperature.unwrap_or(s.temperature),
            top_k: self.top_k.or(s.top_k),
            top_p: self.top_p.or(s.top_p),
            seed: self.seed.unwrap_or(s.seed),
        };
        let m = RunManifest {
            source,
            classes: self.class.unwrap_or(ClassSelect::All),
            samples_per_class: self.samples_per_class.unwrap_or(8),
            guidance,
            sampler,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("out")),
        };
        m.validate()?;
        Ok(m)
    }
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be >= 1"));
        }
        self.guidance.validate()?;
        self.sampler.validate()
    }

    pub fn load_params(&self) -> Result<ModelParams> {
        match &self.source {
            WeightSource::Checkpoint(p) => Ok(weights_io::load_checkpoint(p)?.1),
            WeightSource::Random(seed) => weights_io::random_checkpoint(&ModelConfig::toy(), *seed),
        }
    }

    /// Class id of every sample, in output order.
    pub fn sample_classes(&self, config: &ModelConfig) -> Result<Vec<usize>> {
        let classes: Vec<usize> = match &self.classes {
            ClassSelect::All => (0..config.n_classes).collect(),
            ClassSelect::Ids(ids) => {
                if ids.is_empty() {
                    return Err(Error::config("class list is empty"));
                }
                if let Some(c) = ids.iter().find(|&&c| c >= config.n_classes) {
                    return Err(Error::config(format!(
                        "class {c} out of range for {} classes",
                        config.n_classes
                    )));
                }
                ids.clone()
            }
        };
        Ok(classes
            .into_iter()
            .flat_map(|c| std::iter::repeat_n(c, self.samples_per_class))
            .collect())
    }
}

/// Worker count from `GUIDED_DECODE_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Generates every sample of the manifest. Sample `i` uses seed `sampler.seed + i`.
pub fn run_samples(params: &ModelParams, m: &RunManifest, guidance: &GuidanceConfig) -> Result<Vec<Generation>> {
    let classes = m.sample_classes(&params.config)?;
    let opts = GenerationOptions::new(*guidance, m.sampler);
    pool()?.install(|| {
        classes
            .par_iter()
            .enumerate()
            .map(|(i, &c)| {
                let mut rng = SplitMix64::new(m.sampler.seed.wrapping_add(i as u64));
                generate::generate(params, c, &opts, &mut rng)
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub gamma: f64,
    pub n_samples: usize,
    pub class_accuracy: f64,
    pub validity_rate: f64,
    pub mean_entropy_cond: f64,
    pub mean_entropy_uncond: f64,
    pub mean_entropy_uncond_pert: f64,
    pub mean_entropy_guided: f64,
    pub mean_delta_context_norm: f64,
    pub wall_ms: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(gens: &[Generation], guidance: &GuidanceConfig, wall_ms: f64) -> Result<Summary> {
    let batch = || gens.iter().map(|g| (g.tokens.as_slice(), g.class_id));
    let steps = || gens.iter().flat_map(|g| g.traces.iter());
    Ok(Summary {
        mode: guidance.mode.as_str().to_string(),
        gamma: guidance.gamma,
        n_samples: gens.len(),
        class_accuracy: grammar::class_accuracy(batch())?,
        validity_rate: grammar::validity_rate(batch())?,
        mean_entropy_cond: mean(steps().map(|t| t.entropy_cond)),
        mean_entropy_uncond: mean(steps().map(|t| t.entropy_uncond)),
        mean_entropy_uncond_pert: mean(steps().map(|t| t.entropy_uncond_pert)),
        mean_entropy_guided: mean(steps().map(|t| t.entropy_guided)),
        mean_delta_context_norm: mean(steps().map(|t| t.delta_context_norm)),
        wall_ms,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn trace_records(gens: &[Generation]) -> Vec<TraceRecord> {
    gens.iter()
        .enumerate()
        .flat_map(|(i, g)| {
            g.traces.iter().map(move |t| TraceRecord {
                sample: i,
                class_id: g.class_id,
                trace: t.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub generations: Vec<Generation>,
    pub summary: Summary,
    pub grids_path: PathBuf,
    pub traces_path: PathBuf,
    pub summary_path: PathBuf,
}

/// Writes `grids.txt`, `traces.jsonl` and `summary.json` into the output directory.
pub fn cmd_generate(m: &RunManifest) -> Result<GenerateOutput> {
    m.validate()?;
    let params = m.load_params()?;
    let start = Instant::now();
    let generations = run_samples(&params, m, &m.guidance)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    let summary = summarize(&generations, &m.guidance, wall_ms)?;

    create_dir(&m.output_dir)?;
    let grids: Vec<LabeledGrid> = generations
        .iter()
        .map(|g| LabeledGrid {
            class_id: g.class_id,
            tokens: g.tokens.clone(),
        })
        .collect();
    let grids_path = m.output_dir.join(GRIDS_FILE);
    write_file(&grids_path, grammar::format_grids(&grids).as_bytes())?;

    let traces_path = m.output_dir.join(TRACES_FILE);
    let mut buf = Vec::new();
    diagnostics::write_jsonl(&mut buf, &trace_records(&generations)).map_err(|e| Error::io(&traces_path, e))?;
    write_file(&traces_path, &buf)?;

    let summary_path = m.output_dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&summary_path, format!("{json}\n").as_bytes())?;

    Ok(GenerateOutput {
        generations,
        summary,
        grids_path,
        traces_path,
        summary_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub k: f64,
    pub mode: String,
    pub class_accuracy: f64,
    pub validity_rate: f64,
    pub mean_guided_entropy: f64,
    pub wall_ms: f64,
}

/// Every `(γ, k)` pair with a cosine schedule, each from the same seed.
/// Writes `sweep.csv` into the output directory.
pub fn cmd_sweep(m: &RunManifest, gammas: &[f64], ks: &[f64]) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() || ks.is_empty() {
        return Err(Error::config("sweep needs at least one gamma and one k"));
    }
    m.validate()?;
    let params = m.load_params()?;
    let mut rows = Vec::with_capacity(gammas.len() * ks.len());
    for &gamma in gammas {
        for &k in ks {
            let guidance = GuidanceConfig {
                gamma,
                schedule: Schedule::Cosine { k },
                ..m.guidance
            };
            guidance.validate()?;
            let start = Instant::now();
            let gens = run_samples(&params, m, &guidance)?;
            let s = summarize(&gens, &guidance, start.elapsed().as_secs_f64() * 1e3)?;
            rows.push(SweepRow {
                gamma,
                k,
                mode: s.mode,
                class_accuracy: s.class_accuracy,
                validity_rate: s.validity_rate,
                mean_guided_entropy: s.mean_entropy_guided,
                wall_ms: s.wall_ms,
            });
        }
    }
    create_dir(&m.output_dir)?;
    write_csv(&m.output_dir.join(SWEEP_FILE), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseRow {
    pub step: usize,
    pub entropy_cond: f64,
    pub entropy_uncond: f64,
    pub entropy_uncond_pert: f64,
    pub guidance_gap: f64,
    pub delta_context_norm: f64,
    pub perturbation_budget: f64,
}

/// Per-step means over all samples, from traces.
pub fn step_means(gens: &[Generation]) -> Vec<DiagnoseRow> {
    let steps = gens.first().map_or(0, |g| g.traces.len());
    (0..steps)
        .map(|i| {
            let col = |f: fn(&diagnostics::StepTrace) -> f64| mean(gens.iter().map(|g| f(&g.traces[i])));
            DiagnoseRow {
                step: i + 1,
                entropy_cond: col(|t| t.entropy_cond),
                entropy_uncond: col(|t| t.entropy_uncond),
                entropy_uncond_pert: col(|t| t.entropy_uncond_pert),
                guidance_gap: col(|t| t.guidance_gap),
                delta_context_norm: col(|t| t.delta_context_norm),
                perturbation_budget: col(|t| t.perturbation_budget),
            }
        })
        .collect()
}

/// Writes `diagnose.csv` into the output directory.
pub fn cmd_diagnose(m: &RunManifest) -> Result<Vec<DiagnoseRow>> {
    m.validate()?;
    let params = m.load_params()?;
    let gens = run_samples(&params, m, &m.guidance)?;
    let rows = step_means(&gens);
    create_dir(&m.output_dir)?;
    write_csv(&m.output_dir.join(DIAGNOSE_FILE), &rows)?;
    Ok(rows)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    write_file(path, &bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_grids: usize,
    pub class_accuracy: f64,
    pub validity_rate: f64,
    pub mean_band_fraction: f64,
    /// Grid count per class id.
    pub per_class: Vec<usize>,
}

/// Scores a grid or dataset file (both use the same line format).
pub fn cmd_eval(path: impl AsRef<Path>) -> Result<EvalReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grids = grammar::parse_grids(&text)?;
    let batch = || grids.iter().map(|g| (g.tokens.as_slice(), g.class_id));
    let mut per_class = vec![0usize; grammar::N_CLASSES];
    let mut band = Vec::with_capacity(grids.len());
    for g in &grids {
        band.push(grammar::score_grid(&g.tokens, g.class_id)?.band_fraction);
        per_class[g.class_id] += 1;
    }
    Ok(EvalReport {
        n_grids: grids.len(),
        class_accuracy: grammar::class_accuracy(batch())?,
        validity_rate: grammar::validity_rate(batch())?,
        mean_band_fraction: mean(band.into_iter()),
        per_class,
    })
}

/// Human-readable manifest listing.
pub fn cmd_inspect_weights(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest = weights_io::read_manifest(&bytes)?;
    weights_io::from_bytes(&bytes)?;
    Ok(describe_manifest(&manifest))
}

pub fn describe_manifest(m: &Manifest) -> String {
    let c = &m.config;
    let mut out = format!(
        "format_version {}\n\
         n_layers {} n_heads {} d_model {} d_ff {}\n\
         vocab_size {} n_classes {} max_seq_len {} grid {}x{}\n\
         header_bytes {}\n",
        m.version,
        c.n_layers,
        c.n_heads,
        c.d_model,
        c.d_ff,
        c.vocab_size,
        c.n_classes,
        c.max_seq_len,
        c.grid_rows,
        c.grid_cols,
        m.header_len,
    );
    let mut params = 0;
    for t in &m.tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("{:<24} {:>10} @ {}\n", t.name, dims.join("x"), t.offset));
        params += t.shape.iter().product::<usize>();
    }
    out.push_str(&format!("tensors {} parameters {params}\n", m.tensors.len()));
    out
}
