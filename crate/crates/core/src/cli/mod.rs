//! Command-line surface: train, eval, filter, embed and split-experiment.

pub mod report;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};
use crate::datagen::{self, DataError, Recording, SyntheticCorpus, TrainingExample};
use crate::model::{Model, ModelError};
use crate::trainer::{self, Checkpoint, DatasetSpec, TrainConfig, TrainError, Trainer};

pub use report::{silhouette, MetricsReport, SplitRow, Summary, SCHEMA_VERSION};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) | CliError::Io { .. } => EXIT_BAD_INPUT,
            CliError::Train(TrainError::NonFinite { .. }) => EXIT_NON_FINITE,
            CliError::Train(
                TrainError::Config(_) | TrainError::Io { .. } | TrainError::Checkpoint(_) | TrainError::Data(_),
            ) => EXIT_BAD_INPUT,
            CliError::Train(TrainError::Model(ModelError::Config(_) | ModelError::Length { .. })) => EXIT_BAD_INPUT,
            CliError::Train(_) => EXIT_FAILURE,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Train(e.into())
    }
}

impl From<AudioError> for CliError {
    fn from(e: AudioError) -> Self {
        CliError::Train(e.into())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Train(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "soundfilter", version, about = "One-shot conditional audio filtering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Pool {
    /// Every recording of the dataset.
    All,
    /// Recordings used for training.
    Train,
    /// Held-out recordings.
    Eval,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and metrics.csv under --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        eval_every: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Evaluate a checkpoint on 0 dB mixtures and write a JSON report plus a
    /// per-example CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `synthetic`, a WAV directory, a manifest (.jsonl) or a dataset
        /// JSON file. Defaults to the held-out pool of the training run.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Condition on a family absent from the mixture.
        #[arg(long)]
        absent: bool,
    },
    /// Extract the sound in --reference from --mixture.
    Filter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one conditioning vector per recording as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, value_enum, default_value_t = Pool::All)]
        pool: Pool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all but one family group and evaluate on the held-out group,
    /// for each of k groups.
    SplitExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parses arguments and runs the command, returning the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            out,
            resume,
            steps,
            seed,
            batch_size,
            eval_every,
            checkpoint_every,
        } => {
            let mut cfg = load_config(&config)?;
            let overrides = Overrides {
                steps,
                seed,
                batch_size,
                eval_every,
                checkpoint_every,
            };
            overrides.apply(&mut cfg);
            cfg.validate()?;
            cmd_train(cfg, resume.as_deref(), &out)
        }
        Command::Eval {
            checkpoint,
            dataset,
            n,
            out,
            seed,
            absent,
        } => {
            let report = cmd_eval(&checkpoint, dataset.as_deref(), n, seed, absent)?;
            report.write(&out).map_err(io_err(&out))?;
            let tag = if absent { " (absent reference)" } else { "" };
            println!(
                "SI-SDRi {:.3} ± {:.3} dB over {} examples{tag}",
                report.sisdri.mean, report.sisdri.std, report.sisdri.count
            );
            Ok(())
        }
        Command::Filter {
            checkpoint,
            mixture,
            reference,
            out,
        } => {
            let ratio = cmd_filter(&checkpoint, &mixture, &reference, &out)?;
            println!("output/input energy ratio {ratio:.2} dB");
            Ok(())
        }
        Command::Embed {
            checkpoint,
            dataset,
            pool,
            out,
        } => {
            let embeddings = cmd_embed(&checkpoint, dataset.as_deref(), pool)?;
            fs::write(&out, embeddings.to_csv()).map_err(io_err(&out))?;
            match embeddings.silhouette() {
                Some(s) => println!("{} embeddings, silhouette by family {s:.3}", embeddings.rows.len()),
                None => println!("{} embeddings", embeddings.rows.len()),
            }
            Ok(())
        }
        Command::SplitExperiment {
            config,
            k,
            out,
            steps,
            seed,
        } => {
            let mut cfg = load_config(&config)?;
            Overrides {
                steps,
                seed,
                ..Overrides::default()
            }
            .apply(&mut cfg);
            cfg.validate()?;
            let report = cmd_split_experiment(cfg, k, &out)?;
            print!("{}", report.split_table());
            Ok(())
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub eval_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.steps {
            cfg.total_steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.checkpoint_every {
            cfg.checkpoint_every = v;
        }
    }
}

/// Parses a training config. Errors name the offending field and position.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let cfg: TrainConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path.is_empty() || path == "." {
            CliError::Config(format!("invalid config: {inner}"))
        } else {
            CliError::Config(format!("invalid config field `{path}`: {inner}"))
        }
    })?;
    de.end().map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn cmd_train(config: TrainConfig, resume: Option<&Path>, out: &Path) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = trainer::load_checkpoint(path).map_err(TrainError::from)?;
            let mut resumed = Trainer::from_checkpoint(ckpt)?;
            resumed.config.total_steps = config.total_steps;
            resumed
        }
        None => Trainer::new(config)?,
    };
    let outcome = trainer.run(out)?;
    println!(
        "trained to step {}: held-out SI-SDRi {:.3} dB (from {:.3} dB)",
        outcome.final_step, outcome.final_eval_db, outcome.initial_eval_db
    );
    Ok(())
}

/// Resolves a `--dataset` argument.
pub fn parse_dataset(arg: &str) -> Result<DatasetSpec> {
    if arg == "synthetic" {
        return Ok(DatasetSpec::Synthetic(SyntheticCorpus::default()));
    }
    let path = Path::new(arg);
    if path.is_dir() {
        return Ok(DatasetSpec::WavDirectory { path: path.to_path_buf() });
    }
    if !path.is_file() {
        return Err(CliError::Input(format!("dataset {arg:?} is neither `synthetic` nor an existing path")));
    }
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{arg}: {e}")));
    }
    Ok(DatasetSpec::Manifest { path: path.to_path_buf() })
}

fn load_trained(path: &Path) -> Result<Checkpoint> {
    Ok(trainer::load_checkpoint(path).map_err(TrainError::from)?)
}

/// Recordings selected by `--dataset` / `--pool` for a checkpoint.
fn select_recordings(ckpt: &Checkpoint, dataset: Option<&str>, pool: Pool) -> Result<Vec<Recording>> {
    let cfg = &ckpt.config;
    let recordings = match dataset {
        Some(arg) => parse_dataset(arg)?.load(cfg.clip_len * 2)?,
        None => cfg.dataset.load(cfg.clip_len * 2)?,
    };
    Ok(match pool {
        Pool::All => recordings,
        Pool::Train => trainer::build_pools(cfg, recordings)?.train,
        Pool::Eval => trainer::build_pools(cfg, recordings)?.eval,
    })
}

/// Salt of the stream used to pick references in absent-target evaluation.
const ABSENT_STREAM_SALT: u64 = 0x00ab_5e17;

/// Replaces each conditioning crop with one from a family absent from the
/// mixture.
fn absent_references(examples: &mut [TrainingExample], recordings: &[Recording], seed: u64, len: usize) -> Result<()> {
    for ex in examples.iter_mut() {
        let others: Vec<&Recording> = recordings
            .iter()
            .filter(|r| r.family_id != ex.target_family && r.family_id != ex.noise_family)
            .collect();
        if others.is_empty() {
            return Err(CliError::Input("absent-reference evaluation needs at least three families".into()));
        }
        let mut rng = datagen::example_rng(seed ^ ABSENT_STREAM_SALT, ex.index);
        let rec = others[rng.random_range(0..others.len())];
        ex.conditioning = audio::random_crop(&rec.clip, len, &mut rng)?;
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, dataset: Option<&str>, n: usize, seed: Option<u64>, absent: bool) -> Result<MetricsReport> {
    if n == 0 {
        return Err(CliError::Input("--n must be at least 1".into()));
    }
    let ckpt = load_trained(checkpoint)?;
    let pool = if dataset.is_some() { Pool::All } else { Pool::Eval };
    let recordings = select_recordings(&ckpt, dataset, pool)?;
    let cfg = &ckpt.config;
    let seed = seed.unwrap_or_else(|| cfg.eval_seed());
    let mut examples = datagen::eval_set(&recordings, seed, n, cfg.clip_len, cfg.noise_policy)?;
    if absent {
        absent_references(&mut examples, &recordings, seed, cfg.clip_len)?;
    }
    let rows = trainer::evaluate(&ckpt.model, &examples)?;
    Ok(MetricsReport::from_rows(rows))
}

fn read_clip(path: &Path) -> Result<AudioClip> {
    Ok(audio::load_wav(path)?)
}

/// Filters `mixture` with the sound in `reference`, writes the result and
/// returns the output/input energy ratio in dB. The mixture is zero-padded to
/// the model's length multiple and the output trimmed back; the reference is
/// cropped to the longest usable prefix.
pub fn cmd_filter(checkpoint: &Path, mixture: &Path, reference: &Path, out: &Path) -> Result<f64> {
    let mix = read_clip(mixture)?;
    let refc = read_clip(reference)?;
    if mix.sample_rate != refc.sample_rate {
        return Err(CliError::Input(format!(
            "sample rate mismatch: mixture {} Hz, reference {} Hz",
            mix.sample_rate, refc.sample_rate
        )));
    }
    let ckpt = load_trained(checkpoint)?;
    let model: &Model<f32> = &ckpt.model;
    let m = model.config().sample_multiple();
    if mix.len() < m || refc.len() < m {
        return Err(CliError::Input(format!(
            "inputs must be at least {m} samples (mixture {}, reference {})",
            mix.len(),
            refc.len()
        )));
    }
    let padded_len = mix.len().div_ceil(m) * m;
    let mut padded = mix.samples.clone();
    padded.resize(padded_len, 0.0);
    let reference_len = refc.len() / m * m;
    let mut output = model.filter(&padded, &refc.samples[..reference_len])?;
    output.truncate(mix.len());
    let ratio = trainer::energy_ratio_db(&output, &mix.samples);
    let clip = AudioClip::new(output, mix.sample_rate, "filtered")?;
    audio::save_wav(&clip, out)?;
    Ok(ratio)
}

/// One conditioning vector per recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: Vec<(String, String, Vec<f32>)>,
}

impl Embeddings {
    pub fn to_csv(&self) -> String {
        let d = self.rows.first().map_or(0, |r| r.2.len());
        let mut out = String::from("recording_id,family_id");
        for i in 0..d {
            let _ = write!(out, ",e{i}");
        }
        out.push('\n');
        for (id, fam, v) in &self.rows {
            out.push_str(id);
            out.push(',');
            out.push_str(fam);
            for x in v {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn silhouette(&self) -> Option<f64> {
        let points: Vec<Vec<f64>> = self.rows.iter().map(|r| r.2.iter().map(|&x| f64::from(x)).collect()).collect();
        let labels: Vec<String> = self.rows.iter().map(|r| r.1.clone()).collect();
        silhouette(&points, &labels)
    }
}

pub fn cmd_embed(checkpoint: &Path, dataset: Option<&str>, pool: Pool) -> Result<Embeddings> {
    let ckpt = load_trained(checkpoint)?;
    let recordings = select_recordings(&ckpt, dataset, pool)?;
    let m = ckpt.model.config().sample_multiple();
    let mut rows = Vec::with_capacity(recordings.len());
    for r in &recordings {
        let usable = r.clip.len() / m * m;
        if usable == 0 {
            return Err(CliError::Input(format!("{} is shorter than {m} samples", r.recording_id)));
        }
        let v = ckpt.model.conditioning(&r.clip.samples[..usable])?;
        rows.push((r.recording_id.clone(), r.family_id.clone(), v));
    }
    Ok(Embeddings { rows })
}

/// Trains one model per family split and evaluates each on its unseen
/// families. Writes `splits.json`, one run directory per split and
/// `summary.json` / `summary.csv` under `out`.
pub fn cmd_split_experiment(config: TrainConfig, k: usize, out: &Path) -> Result<MetricsReport> {
    let recordings = config.dataset.load(config.clip_len * 2)?;
    let families = datagen::family_ids(&recordings);
    let splits = datagen::build_split_manifest(&families, k, config.seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = out.join("splits.json");
    fs::write(&manifest, serde_json::to_string_pretty(&splits).expect("splits serialize")).map_err(io_err(&manifest))?;
    let mut results = Vec::with_capacity(splits.len());
    for split in &splits {
        let mut cfg = config.clone();
        cfg.train_families = Some(split.train_families.clone());
        cfg.eval_families = Some(split.eval_families.clone());
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(&out.join(format!("split-{}", split.index)))?;
        let rows = trainer::evaluate(&trainer.model, trainer.eval_set())?;
        let sisdri = Summary::of(&rows.iter().map(|r| r.si_sdri).collect::<Vec<_>>());
        results.push((
            SplitRow {
                split: split.index,
                train_families: split.train_families.clone(),
                eval_families: split.eval_families.clone(),
                sisdri,
            },
            rows,
        ));
    }
    let report = MetricsReport::from_splits(results);
    let path = out.join("summary.json");
    report.write(&path).map_err(io_err(&path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let err = parse_config(r#"{"model": {"base_channels": "eight"}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.base_channels"), "{msg}");
        assert_eq!(err.exit_code(), EXIT_BAD_INPUT);
        let err = parse_config(r#"{"batch_sise": 8}"#).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
        let err = parse_config("{\"total_steps\": 1,\n}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(parse_config("{}").unwrap(), TrainConfig::default());
    }

    #[test]
    fn flags_override_config() {
        let mut cfg = TrainConfig::desk();
        Overrides {
            steps: Some(3),
            seed: Some(9),
            ..Overrides::default()
        }
        .apply(&mut cfg);
        assert_eq!((cfg.total_steps, cfg.seed, cfg.batch_size), (3, 9, 8));
    }

    #[test]
    fn non_finite_maps_to_exit_3() {
        let e = CliError::Train(TrainError::NonFinite {
            step: 1,
            detail: "loss".into(),
        });
        assert_eq!(e.exit_code(), EXIT_NON_FINITE);
    }

    #[test]
    fn dataset_argument_forms() {
        assert!(matches!(parse_dataset("synthetic").unwrap(), DatasetSpec::Synthetic(_)));
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(parse_dataset(dir.path().to_str().unwrap()).unwrap(), DatasetSpec::WavDirectory { .. }));
        let json = dir.path().join("d.json");
        fs::write(&json, r#"{"kind": "synthetic", "families": 3}"#).unwrap();
        match parse_dataset(json.to_str().unwrap()).unwrap() {
            DatasetSpec::Synthetic(c) => assert_eq!(c.families, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_dataset("/no/such/path").unwrap_err().exit_code(), EXIT_BAD_INPUT);
    }
}
