use std::path::Path;
use std::process::Command;

use guided_decode::diagnostics::{self, normalized_entropy};
use guided_decode::run::{self, ClassSelect, ManifestOverrides, RunManifest, SweepRow};
use guided_decode::weights_io;
use guided_decode::{grammar, GuidanceMode, ModelConfig, Schedule};

const BIN: &str = env!("CARGO_BIN_EXE_guided-decode");

fn manifest(dir: &Path, extra: &str) -> RunManifest {
    let text = format!(
        "random_seed = 42\noutput_dir = {:?}\n{extra}",
        dir.display().to_string()
    );
    ManifestOverrides::from_toml(&text).unwrap().into_manifest().unwrap()
}

#[test]
fn generate_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "class = [0, 1]\nsamples_per_class = 8\n");
    let out = run::cmd_generate(&m).unwrap();
    let grids = grammar::parse_grids(&std::fs::read_to_string(&out.grids_path).unwrap()).unwrap();
    assert_eq!(grids.len(), 16);
    assert_eq!(grids.iter().filter(|g| g.class_id == 0).count(), 8);
    let traces = diagnostics::read_jsonl(&std::fs::read_to_string(&out.traces_path).unwrap()).unwrap();
    assert_eq!(traces.len(), 16 * 64);
    for (i, r) in traces.iter().enumerate() {
        assert_eq!(r.sample, i / 64);
        assert_eq!(r.trace.step, i % 64 + 1);
        assert_eq!(r.trace.sampled_token, grids[r.sample].tokens[r.trace.step - 1]);
    }
    let summary: run::Summary = serde_json::from_str(&std::fs::read_to_string(&out.summary_path).unwrap()).unwrap();
    assert_eq!(summary.n_samples, 16);
    assert_eq!(summary.mode, "softcfg");
    let acc = grammar::class_accuracy(grids.iter().map(|g| (g.tokens.as_slice(), g.class_id))).unwrap();
    assert_eq!(summary.class_accuracy, acc);
}

#[test]
fn cfg_gamma_zero_equals_none_through_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run::cmd_generate(&manifest(a.path(), "mode = \"none\"\nsamples_per_class = 2\n")).unwrap();
    run::cmd_generate(&manifest(
        b.path(),
        "mode = \"cfg\"\ngamma = 0.0\nsamples_per_class = 2\n",
    ))
    .unwrap();
    let ga = std::fs::read(a.path().join(run::GRIDS_FILE)).unwrap();
    let gb = std::fs::read(b.path().join(run::GRIDS_FILE)).unwrap();
    assert_eq!(ga, gb);
}

#[test]
fn generate_is_deterministic_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "generate".to_string(),
            "--random-seed".into(),
            "42".into(),
            "--samples-per-class".into(),
            "3".into(),
            "--output-dir".into(),
            d.display().to_string(),
        ]
    };
    let one = Command::new(BIN)
        .args(args(a.path()))
        .env("GUIDED_DECODE_THREADS", "1")
        .output()
        .unwrap();
    let four = Command::new(BIN)
        .args(args(b.path()))
        .env("GUIDED_DECODE_THREADS", "4")
        .output()
        .unwrap();
    assert!(one.status.success() && four.status.success());
    for f in [run::GRIDS_FILE, run::TRACES_FILE] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let bad = Command::new(BIN)
        .args(args(a.path()))
        .env("GUIDED_DECODE_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("GUIDED_DECODE_THREADS"));
}

fn strip_wall(rows: &[SweepRow]) -> Vec<SweepRow> {
    rows.iter()
        .map(|r| SweepRow {
            wall_ms: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn sweep_rows_and_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "samples_per_class = 2\nmode = \"cfg\"\n");
    let rows = run::cmd_sweep(&m, &[0.0, 1.5, 3.0], &[1.0, 2.0]).unwrap();
    assert_eq!(rows.len(), 6);
    let csv = std::fs::read_to_string(dir.path().join(run::SWEEP_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(
        csv.lines().next().unwrap(),
        "gamma,k,mode,class_accuracy,validity_rate,mean_guided_entropy,wall_ms"
    );

    let dup = run::cmd_sweep(&m, &[1.5, 1.5], &[2.0]).unwrap();
    assert_eq!(strip_wall(&dup[..1]), strip_wall(&dup[1..]));
    assert_eq!(strip_wall(&dup[..1]), strip_wall(&rows[3..4]));

    // the γ = 0, k = 1 cell against a plain generate run with the same schedule
    let g = tempfile::tempdir().unwrap();
    let gm = RunManifest {
        output_dir: g.path().to_path_buf(),
        guidance: guided_decode::GuidanceConfig {
            gamma: 0.0,
            schedule: Schedule::Cosine { k: 1.0 },
            ..m.guidance
        },
        ..m.clone()
    };
    let s = run::cmd_generate(&gm).unwrap().summary;
    assert_eq!(rows[0].class_accuracy, s.class_accuracy);
    assert_eq!(rows[0].validity_rate, s.validity_rate);
    assert_eq!(rows[0].mean_guided_entropy, s.mean_entropy_guided);
    assert!(run::cmd_sweep(&m, &[], &[1.0]).is_err());
}

#[test]
fn diagnose_rows() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), "samples_per_class = 2\n");
    assert!(m.guidance.step_norm);
    let rows = run::cmd_diagnose(&m).unwrap();
    assert_eq!(rows.len(), 64);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.perturbation_budget)));
    let csv = std::fs::read_to_string(dir.path().join(run::DIAGNOSE_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 65);

    // Step 1 recomputed from the raw model outputs, independent of the traces.
    let params = m.load_params().unwrap();
    let classes = m.sample_classes(&params.config).unwrap();
    let mut gap = 0.0;
    for &c in &classes {
        let seeded = guided_decode::model::init_caches(&params, c).unwrap();
        let hc = normalized_entropy(&guided_decode::tensor::softmax(&seeded.cond_logits).unwrap()).unwrap();
        let hu = normalized_entropy(&guided_decode::tensor::softmax(&seeded.uncond_logits).unwrap()).unwrap();
        gap += hu - hc;
    }
    gap /= classes.len() as f64;
    assert!((rows[0].guidance_gap - gap).abs() < 1e-12);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "random_seed = 1\nmode = \"cfg\"\ngamma = 2.0\nsamples_per_class = 1\nclass = 2\noutput_dir = {:?}\n",
            dir.path().join("out").display().to_string()
        ),
    )
    .unwrap();
    let out = Command::new(BIN)
        .args(["generate", "--config"])
        .arg(&cfg)
        .args(["--mode", "softcfg", "--step-norm", "false"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: run::Summary = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary.mode, "softcfg");
    assert_eq!(summary.gamma, 2.0);
    assert_eq!(summary.n_samples, 1);
    let grids = std::fs::read_to_string(dir.path().join("out").join(run::GRIDS_FILE)).unwrap();
    assert!(grids.starts_with("2,"));
}

#[test]
fn binary_errors_exit_nonzero() {
    let out = Command::new(BIN).args(["generate"]).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(BIN)
        .args(["generate", "--random-seed", "1", "--checkpoint", "x.scfg"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.scfg");
    let out = Command::new(BIN)
        .arg("generate")
        .arg("--checkpoint")
        .arg(&missing)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.scfg"));
    let out = Command::new(BIN)
        .args(["generate", "--random-seed", "1", "--mode", "fast"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn checkpoint_source_matches_random_source() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("w.scfg");
    weights_io::save_checkpoint(&ckpt, &weights_io::random_checkpoint(&ModelConfig::toy(), 42).unwrap()).unwrap();
    let a = manifest(&dir.path().join("a"), "samples_per_class = 1\n");
    let b = RunManifest {
        source: run::WeightSource::Checkpoint(ckpt.clone()),
        output_dir: dir.path().join("b"),
        ..a.clone()
    };
    run::cmd_generate(&a).unwrap();
    run::cmd_generate(&b).unwrap();
    for f in [run::GRIDS_FILE, run::TRACES_FILE] {
        assert_eq!(
            std::fs::read(a.output_dir.join(f)).unwrap(),
            std::fs::read(b.output_dir.join(f)).unwrap()
        );
    }

    let out = Command::new(BIN).arg("inspect-weights").arg(&ckpt).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("token_embedding"));
    assert!(text.contains("tensors 29"));

    let out = Command::new(BIN)
        .arg("eval")
        .arg(a.output_dir.join(run::GRIDS_FILE))
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: run::EvalReport = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report.n_grids, 4);
}

#[test]
fn sweep_and_diagnose_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args([
            "sweep",
            "--random-seed",
            "3",
            "--samples-per-class",
            "1",
            "--mode",
            "cfg",
        ])
        .args(["--gammas", "1,2", "--ks", "0.5,1,4", "--output-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join(run::SWEEP_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 7);
    let out = Command::new(BIN)
        .args([
            "diagnose",
            "--random-seed",
            "3",
            "--samples-per-class",
            "1",
            "--output-dir",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read_to_string(dir.path().join(run::DIAGNOSE_FILE))
            .unwrap()
            .lines()
            .count(),
        65
    );
}

#[test]
fn manifest_defaults() {
    let m = ManifestOverrides {
        random_seed: Some(0),
        ..Default::default()
    }
    .into_manifest()
    .unwrap();
    assert_eq!(m.classes, ClassSelect::All);
    assert_eq!(m.guidance.mode, GuidanceMode::SoftCfg);
    assert_eq!(m.sampler.seed, 42);
}
