use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use soundfilter::audio::{self, AudioClip};
use soundfilter::cli::report::MetricsReport;
use soundfilter::trainer::{self, FINAL_CHECKPOINT, METRICS_FILE, METRICS_HEADER};

const TINY_CONFIG: &str = r#"{
    "batch_size": 2,
    "total_steps": 2,
    "eval_every": 1,
    "eval_examples": 3,
    "clip_len": 1024,
    "holdout_per_family": 1,
    "dataset": {"kind": "synthetic", "families": 4, "recordings_per_family": 3, "duration_s": 0.5},
    "model": {"base_channels": 4, "embedding_dim": 8}
}"#;

fn soundfilter(args: &[&str], paths: &[&Path]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_soundfilter"));
    cmd.env("RUST_LOG", "warn").args(args);
    for p in paths {
        cmd.arg(p);
    }
    cmd.output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_soundfilter")).env("RUST_LOG", "warn").args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

/// Trains the tiny config for `steps` steps into `dir/name`.
fn train(dir: &Path, name: &str, steps: u64) -> PathBuf {
    let cfg = write_config(dir, TINY_CONFIG);
    let out = dir.join(name);
    run_ok(&["train", "--config", s(&cfg), "--out", s(&out), "--steps", &steps.to_string()]);
    out
}

#[test]
fn zero_steps_writes_checkpoint_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "run", 0);
    assert!(out.join(FINAL_CHECKPOINT).is_file());
    let csv = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().collect::<Vec<_>>(), vec![METRICS_HEADER]);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"batch_size": 2, "model": {"base_channels": "eight"}}"#);
    let out = soundfilter(&["train", "--config"], &[&cfg, Path::new("--out"), &dir.path().join("run")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.base_channels"), "{err}");

    let cfg = write_config(dir.path(), r#"{"batch_size": 2,"#);
    let out = soundfilter(&["train", "--config"], &[&cfg, Path::new("--out"), &dir.path().join("run")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"clip_len": 1000}"#);
    let out = soundfilter(&["train", "--config"], &[&cfg, Path::new("--out"), &dir.path().join("run")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("clip_len"));

    let out = soundfilter(&["eval", "--checkpoint"], &[&dir.path().join("missing.ckpt"), Path::new("--out"), &dir.path().join("r.json")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(train(dir.path(), "a", 2).join(METRICS_FILE)).unwrap();
    let b = std::fs::read(train(dir.path(), "b", 2).join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 3);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let full = dir.path().join("full");
    run_ok(&["train", "--config", s(&cfg), "--out", s(&full), "--steps", "4"]);
    let part = dir.path().join("part");
    run_ok(&["train", "--config", s(&cfg), "--out", s(&part), "--steps", "2"]);
    let resumed = dir.path().join("resumed");
    run_ok(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--steps",
        "4",
        "--resume",
        s(&part.join(FINAL_CHECKPOINT)),
    ]);
    let rows = |p: &Path| trainer::read_metrics(&p.join(METRICS_FILE)).unwrap();
    let mut stitched = rows(&part);
    stitched.extend(rows(&resumed));
    assert_eq!(stitched, rows(&full));
    let a = trainer::load_checkpoint(full.join(FINAL_CHECKPOINT)).unwrap();
    let b = trainer::load_checkpoint(resumed.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn eval_of_one_example_has_zero_std() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", 1);
    let report = dir.path().join("report.json");
    run_ok(&["eval", "--checkpoint", s(&run.join(FINAL_CHECKPOINT)), "--n", "1", "--out", s(&report)]);
    let parsed: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.sisdri.count, 1);
    assert_eq!(parsed.sisdri.std, 0.0);
    assert!(parsed.sisdri.mean.is_finite());
    let csv = std::fs::read_to_string(report.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn eval_with_absent_reference_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", 0);
    let report = dir.path().join("absent.json");
    let out = run_ok(&["eval", "--checkpoint", s(&run.join(FINAL_CHECKPOINT)), "--n", "4", "--absent", "--out", s(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("absent"));
    let parsed: MetricsReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.rows.len(), 4);
}

fn tone(len: usize, rate: u32, freq: f64, amp: f64) -> AudioClip {
    let samples = (0..len)
        .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(rate)).sin()) as f32)
        .collect();
    AudioClip::new(samples, rate, "tone").unwrap()
}

#[test]
fn untrained_filter_passes_the_mixture_through() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", 0);
    let (mix, refp, out) = (dir.path().join("mix.wav"), dir.path().join("ref.wav"), dir.path().join("out.wav"));
    audio::save_wav(&tone(3000, 8000, 440.0, 0.4), &mix).unwrap();
    audio::save_wav(&tone(1500, 8000, 220.0, 0.3), &refp).unwrap();
    run_ok(&["filter", "--checkpoint", s(&run.join(FINAL_CHECKPOINT)), "--mixture", s(&mix), "--reference", s(&refp), "--out", s(&out)]);
    let input = audio::load_wav(&mix).unwrap();
    let output = audio::load_wav(&out).unwrap();
    assert_eq!(output.len(), input.len());
    assert_eq!(output.sample_rate, 8000);
    let worst = input.samples.iter().zip(&output.samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 32768.0, "{worst}");
}

#[test]
fn filter_rejects_mismatched_rates() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", 0);
    let (mix, refp) = (dir.path().join("mix.wav"), dir.path().join("ref.wav"));
    audio::save_wav(&tone(2048, 8000, 440.0, 0.4), &mix).unwrap();
    audio::save_wav(&tone(2048, 16000, 220.0, 0.3), &refp).unwrap();
    let out = soundfilter(
        &["filter", "--checkpoint"],
        &[&run.join(FINAL_CHECKPOINT), Path::new("--mixture"), &mix, Path::new("--reference"), &refp, Path::new("--out"), &dir.path().join("o.wav")],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("o.wav").exists());
}

#[test]
fn embed_writes_one_unit_vector_per_recording() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "run", 0);
    let csv_path = dir.path().join("emb.csv");
    run_ok(&["embed", "--checkpoint", s(&run.join(FINAL_CHECKPOINT)), "--out", s(&csv_path)]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&header[..3], &["recording_id", "family_id", "e0"]);
    assert_eq!(header.len(), 2 + 8);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 3);
    for r in &rows {
        let norm = r[2..].iter().map(|v| v.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "{norm}");
    }

    run_ok(&["embed", "--checkpoint", s(&run.join(FINAL_CHECKPOINT)), "--pool", "eval", "--out", s(&csv_path)]);
    assert_eq!(std::fs::read_to_string(&csv_path).unwrap().lines().count(), 1 + 4);
}

#[test]
fn split_experiment_covers_every_family_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY_CONFIG);
    let out = dir.path().join("splits");
    let stdout = run_ok(&["split-experiment", "--config", s(&cfg), "--k", "2", "--steps", "1", "--out", s(&out)]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("avg"));
    let summary: MetricsReport = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.splits.len(), 2);
    let mut evaluated: Vec<String> = summary.splits.iter().flat_map(|s| s.eval_families.clone()).collect();
    evaluated.sort();
    assert_eq!(evaluated.len(), 4);
    evaluated.dedup();
    assert_eq!(evaluated.len(), 4);
    for split in &summary.splits {
        assert!(split.train_families.iter().all(|f| !split.eval_families.contains(f)));
    }
    let mean_of_means = summary.splits.iter().map(|s| s.sisdri.mean).sum::<f64>() / 2.0;
    assert!((summary.grand_average_db.unwrap() - mean_of_means).abs() < 1e-12);
}

#[test]
fn desk_config_file_matches_the_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = soundfilter::cli::load_config(&path).unwrap();
    assert_eq!(cfg, trainer::TrainConfig::desk());
    assert_eq!((cfg.batch_size, cfg.total_steps, cfg.clip_len), (8, 6000, 8192));
    assert_eq!((cfg.model.base_channels, cfg.model.embedding_dim), (8, 64));
}
