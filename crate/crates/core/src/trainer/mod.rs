//! Adam, the training step and loop, held-out evaluation and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioError;
use crate::datagen::{self, DataError, NoisePolicy, Recording, SyntheticCorpus, TrainingExample};
use crate::model::{Model, ModelConfig, ModelError};
use crate::objective::{self, ObjectiveError};
use crate::tensor::{NormMode, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<AudioError> for TrainError {
    fn from(e: AudioError) -> Self {
        TrainError::Data(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &Model<f32>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Bias-corrected update from the gradients stored in `model`. A
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, model: &mut Model<f32>) -> std::result::Result<(), String> {
        if let Some(p) = model.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(format!("gradient of {} is not finite", p.name));
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let (one_minus_b1, one_minus_b2) = ((1.0 - c.beta1) as f32, (1.0 - c.beta2) as f32);
        let correction1 = 1.0 - c.beta1.powi(t);
        let correction2 = 1.0 - c.beta2.powi(t);
        let step_size = (c.lr / correction1) as f32;
        let sqrt_c2 = correction2.sqrt() as f32;
        let eps = c.eps as f32;
        for ((p, m), v) in model.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                value[i] -= step_size * m[i] / (v[i].sqrt() / sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}

/// Where recordings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticCorpus),
    WavDirectory { path: PathBuf },
    Manifest { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticCorpus::default())
    }
}

impl DatasetSpec {
    /// Materializes the recordings. `min_len` filters WAV directories.
    pub fn load(&self, min_len: usize) -> Result<Vec<Recording>> {
        Ok(match self {
            DatasetSpec::Synthetic(corpus) => corpus.build()?,
            DatasetSpec::WavDirectory { path } => datagen::scan_wav_directory(path, min_len)?.recordings,
            DatasetSpec::Manifest { path } => datagen::read_manifest(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_examples: usize,
    /// Extra checkpoints every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub snr_range_db: [f64; 2],
    pub clip_len: usize,
    pub dataset: DatasetSpec,
    /// Recordings per family reserved for evaluation.
    pub holdout_per_family: usize,
    /// Restrict training to these families (all when absent).
    pub train_families: Option<Vec<String>>,
    /// Restrict evaluation to these families (all when absent).
    pub eval_families: Option<Vec<String>>,
    pub noise_policy: NoisePolicy,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    /// Global gradient-norm clip, off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_steps: 6000,
            eval_every: 500,
            eval_examples: 64,
            checkpoint_every: 0,
            seed: 0,
            snr_range_db: [-4.0, 4.0],
            clip_len: 8192,
            dataset: DatasetSpec::default(),
            holdout_per_family: 5,
            train_families: None,
            eval_families: None,
            noise_policy: NoisePolicy::AnyOther,
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: batch 8, base 8 channels, d 64.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = self.model.sample_multiple();
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.clip_len == 0 || !self.clip_len.is_multiple_of(m) {
            return fail(format!("clip_len {} must be a positive multiple of {m}", self.clip_len));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be at least 1".into());
        }
        if self.snr_range_db[0] > self.snr_range_db[1] {
            return fail(format!("snr_range_db {:?} is empty", self.snr_range_db));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Seed of the fixed evaluation set.
    pub fn eval_seed(&self) -> u64 {
        self.seed ^ 0x5eed_e7a1
    }
}

/// Training and evaluation recording pools.
#[derive(Debug, Clone)]
pub struct Pools {
    pub train: Vec<Recording>,
    pub eval: Vec<Recording>,
}

/// Holds out the last `holdout_per_family` recordings of every family for
/// evaluation, then applies the family filters. Families evaluated but never
/// trained on contribute all their recordings to the evaluation pool.
pub fn build_pools(config: &TrainConfig, recordings: Vec<Recording>) -> Result<Pools> {
    let (mut train, mut eval) = datagen::holdout_split(&recordings, config.holdout_per_family);
    if let Some(fams) = &config.train_families {
        train = datagen::filter_families(&train, fams);
    }
    if let Some(fams) = &config.eval_families {
        let unseen: Vec<String> = fams.iter().filter(|f| !datagen::family_ids(&train).contains(f)).cloned().collect();
        eval = recordings
            .iter()
            .filter(|r| fams.contains(&r.family_id) && (unseen.contains(&r.family_id) || eval.contains(r)))
            .cloned()
            .collect();
    }
    if train.len() < 2 || eval.len() < 2 {
        return Err(TrainError::Config(format!(
            "need at least two training and two evaluation recordings, have {} and {}",
            train.len(),
            eval.len()
        )));
    }
    Ok(Pools { train, eval })
}

/// One evaluated example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub example_id: u64,
    pub target_family: String,
    pub noise_family: String,
    pub snr_db: f64,
    pub si_sdr_in: f64,
    pub si_sdr_out: f64,
    /// Improvement, capped to `±30` dB.
    pub si_sdri: f64,
    /// Output energy over mixture energy in dB.
    pub energy_ratio_db: f64,
}

const EVAL_BATCH: usize = 8;

/// Runs the model on every example (inference mode) and scores it.
pub fn evaluate(model: &Model<f32>, examples: &[TrainingExample]) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let mixtures: Vec<&[f32]> = chunk.iter().map(|e| e.mixture.samples.as_slice()).collect();
        let refs: Vec<&[f32]> = chunk.iter().map(|e| e.conditioning.samples.as_slice()).collect();
        let outputs = model.filter_batch(&mixtures, &refs)?;
        for (ex, out) in chunk.iter().zip(outputs) {
            let target = &ex.target.samples;
            let si_in = objective::si_sdr(&ex.mixture.samples, target)?.value_db;
            let si_out = objective::si_sdr(&out, target)?.value_db;
            rows.push(EvalRow {
                example_id: ex.index,
                target_family: ex.target_family.clone(),
                noise_family: ex.noise_family.clone(),
                snr_db: ex.snr_db,
                si_sdr_in: si_in,
                si_sdr_out: si_out,
                si_sdri: objective::cap_report(objective::si_sdr_improvement(&out, &ex.mixture.samples, target)?),
                energy_ratio_db: energy_ratio_db(&out, &ex.mixture.samples),
            });
        }
    }
    Ok(rows)
}

/// `10 log10(E_output / E_input)`.
pub fn energy_ratio_db(output: &[f32], input: &[f32]) -> f64 {
    10.0 * (crate::audio::energy(output) / crate::audio::energy(input)).log10()
}

pub fn mean_sisdri(rows: &[EvalRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|r| r.si_sdri).sum::<f64>() / rows.len() as f64
}

fn batch_tensor(clips: impl Iterator<Item = Vec<f32>>, batch: usize, len: usize) -> Result<Tensor<f32>> {
    let data: Vec<f32> = clips.flatten().collect();
    Ok(Tensor::new(&[batch, 1, len], data)?)
}

/// Model, optimizer and data state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam,
    pub step: u64,
    pub pools: Pools,
    eval_set: Vec<TrainingExample>,
    /// Sum and count of training losses since the last log row.
    loss_acc: (f64, u64),
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_step: u64,
    /// `(step, train loss dB, eval SI-SDRi dB)` rows written this run.
    pub rows: Vec<(u64, f64, f64)>,
    /// Eval SI-SDRi at the starting step.
    pub initial_eval_db: f64,
    pub final_eval_db: f64,
    pub checkpoint: PathBuf,
}

pub const METRICS_HEADER: &str = "step,train_loss_db,eval_sisdri_db";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let recordings = config.dataset.load(2 * config.clip_len)?;
        let model = Model::new(config.model.clone(), config.seed)?;
        Self::assemble(config, model, None, 0, (0.0, 0), recordings)
    }

    /// Continues from a checkpoint; the recordings are rebuilt from its config.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let recordings = ckpt.config.dataset.load(2 * ckpt.config.clip_len)?;
        Self::assemble(ckpt.config, ckpt.model, Some(ckpt.adam), ckpt.step, ckpt.loss_acc, recordings)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<f32>,
        adam: Option<Adam>,
        step: u64,
        loss_acc: (f64, u64),
        recordings: Vec<Recording>,
    ) -> Result<Self> {
        config.validate()?;
        let pools = build_pools(&config, recordings)?;
        let eval_set = datagen::eval_set(&pools.eval, config.eval_seed(), config.eval_examples, config.clip_len, NoisePolicy::AnyOther)?;
        let adam = adam.unwrap_or_else(|| Adam::new(config.optimizer, &model));
        Ok(Self {
            config,
            model,
            adam,
            step,
            pools,
            eval_set,
            loss_acc,
        })
    }

    pub fn eval_set(&self) -> &[TrainingExample] {
        &self.eval_set
    }

    /// Training examples of step `step`: indices `step * B .. (step + 1) * B`.
    pub fn batch_for(&self, step: u64) -> Result<Vec<TrainingExample>> {
        let b = self.config.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|i| {
                datagen::make_training_example_with(
                    &self.pools.train,
                    i,
                    &mut datagen::example_rng(self.config.seed, i),
                    self.config.clip_len,
                    self.config.snr_range_db,
                    self.config.noise_policy,
                )
                .map_err(Into::into)
            })
            .collect()
    }

    /// Forward, backward and Adam update on one batch; returns the loss in dB
    /// (the negated soft-clipped SI-SDR, batch mean).
    pub fn train_step(&mut self, batch: &[TrainingExample]) -> Result<f64> {
        let step = self.step + 1;
        let b = batch.len();
        let len = batch.first().map_or(0, |e| e.target.len());
        if b == 0 || batch.iter().any(|e| e.target.len() != len || e.mixture.len() != len || e.conditioning.len() != len) {
            return Err(TrainError::Config("batch clips must be non-empty and of equal length".into()));
        }
        let tape = Tape::new();
        let mut g = self.model.bind(&tape, NormMode::Train);
        let mix = tape.constant(batch_tensor(batch.iter().map(|e| e.mixture.samples.clone()), b, len)?);
        let cond = tape.constant(batch_tensor(batch.iter().map(|e| e.conditioning.samples.clone()), b, len)?);
        let target = tape.constant(batch_tensor(batch.iter().map(|e| e.target.samples.clone()), b, len)?);
        let v = g.conditioning_vector_train(cond, Some(target))?;
        let estimate = g.generator(mix, v)?;
        let loss = objective::si_sdr_loss(&tape, estimate, target, objective::soft_clip_tau())?;
        let loss_db = f64::from(tape.value(loss).item());
        if !loss_db.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("loss is {loss_db}"),
            });
        }
        tape.backward(loss).map_err(|e| TrainError::NonFinite {
            step,
            detail: e.to_string(),
        })?;
        let vars = g.vars().to_vec();
        let stats = g.finish();
        for (p, var) in self.model.params_mut().iter_mut().zip(vars) {
            p.grad = tape.grad(var).expect("parameter gradient");
        }
        if let Some(clip) = self.config.grad_clip {
            let norm = self
                .model
                .params()
                .iter()
                .map(|p| p.grad.data().iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = (clip / norm) as f32;
                for p in self.model.params_mut() {
                    p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        self.adam.step(&mut self.model).map_err(|detail| TrainError::NonFinite { step, detail })?;
        self.model.set_bn_stats(stats);
        self.step = step;
        Ok(loss_db)
    }

    /// Mean SI-SDRi of the current model on the fixed evaluation set.
    pub fn evaluate(&self) -> Result<f64> {
        Ok(mean_sisdri(&evaluate(&self.model, &self.eval_set)?))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step,
            data_seed: self.config.seed,
            next_example: self.step * self.config.batch_size as u64,
            loss_acc: self.loss_acc,
        }
    }

    /// Trains until `total_steps`, logging to `out_dir/metrics.csv` every
    /// `eval_every` steps and at the end, and writing `out_dir/final.ckpt`.
    /// Resumed runs truncate log rows past the checkpoint step and append.
    /// On a non-finite loss the last written checkpoint is left untouched.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let csv_path = out_dir.join(METRICS_FILE);
        let mut csv = prepare_metrics(&csv_path, self.step)?;
        let initial_eval_db = self.evaluate()?;
        info!("step {}: eval SI-SDRi {initial_eval_db:.3} dB", self.step);
        let ckpt_path = out_dir.join(FINAL_CHECKPOINT);
        if self.step == 0 {
            save_checkpoint(&self.checkpoint(), &ckpt_path)?;
        }
        let mut rows = Vec::new();
        let mut last_eval = initial_eval_db;
        while self.step < self.config.total_steps {
            let batch = self.batch_for(self.step)?;
            let loss = self.train_step(&batch)?;
            self.loss_acc.0 += loss;
            self.loss_acc.1 += 1;
            let at_end = self.step == self.config.total_steps;
            if self.step.is_multiple_of(self.config.eval_every) || at_end {
                last_eval = self.evaluate()?;
                let train_loss = self.loss_acc.0 / self.loss_acc.1 as f64;
                self.loss_acc = (0.0, 0);
                info!("step {}: train loss {train_loss:.3} dB, eval SI-SDRi {last_eval:.3} dB", self.step);
                writeln!(csv, "{},{train_loss},{last_eval}", self.step).map_err(io_err(&csv_path))?;
                csv.flush().map_err(io_err(&csv_path))?;
                rows.push((self.step, train_loss, last_eval));
            }
            let periodic = self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every);
            if periodic {
                save_checkpoint(&self.checkpoint(), out_dir.join(format!("step-{:08}.ckpt", self.step)))?;
            }
            if periodic || at_end {
                save_checkpoint(&self.checkpoint(), &ckpt_path)?;
            }
        }
        Ok(TrainOutcome {
            final_step: self.step,
            rows,
            initial_eval_db,
            final_eval_db: last_eval,
            checkpoint: ckpt_path,
        })
    }
}

/// Opens the metrics log for appending, keeping the header and rows up to
/// `step`.
fn prepare_metrics(path: &Path, step: u64) -> Result<fs::File> {
    let mut kept = vec![METRICS_HEADER.to_string()];
    if step > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step))
                    .map(str::to_string),
            );
        }
    }
    let mut body = kept.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(io_err(path))?;
    fs::OpenOptions::new().append(true).open(path).map_err(io_err(path))
}

/// Parses a metrics log into `(step, train loss, eval SI-SDRi)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || TrainError::Config(format!("{}: malformed row {line:?}", path.display()));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            total_steps: 4,
            eval_every: 2,
            eval_examples: 4,
            clip_len: 512,
            seed: 11,
            dataset: DatasetSpec::Synthetic(SyntheticCorpus {
                families: 2,
                recordings_per_family: 4,
                duration_s: 0.5,
                sample_rate: 8000,
                seed: 1,
            }),
            holdout_per_family: 1,
            model: ModelConfig {
                base_channels: 4,
                embedding_dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut model = Model::<f32>::new(toy_config().model, 0).unwrap();
        let before = model.clone();
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.step(&mut model).unwrap();
        assert_eq!(adam.t, 1);
        assert_eq!(model, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut model = Model::<f32>::new(toy_config().model, 0).unwrap();
        let before = model.clone();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let g = if i % 2 == 0 { 0.37 } else { -2.5 };
            p.grad.data_mut().iter_mut().for_each(|v| *v = g);
        }
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.step(&mut model).unwrap();
        for (i, (p, q)) in model.params().iter().zip(before.params()).enumerate() {
            let g: f64 = if i % 2 == 0 { 0.37 } else { -2.5 };
            // closed form: -lr * g / (|g| + eps)
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                // the difference is only resolved to the f32 spacing of the values
                let tol = 2.0 * f64::from(f32::EPSILON) * f64::from(a.abs().max(b.abs())) + 1e-10;
                assert!((f64::from(a - b) - expected).abs() < tol, "{} {}", a - b, expected);
            }
        }
    }

    #[test]
    fn adam_rejects_nan_gradient_naming_parameter() {
        let mut model = Model::<f32>::new(toy_config().model, 0).unwrap();
        model.params_mut()[3].grad.data_mut()[0] = f32::NAN;
        let name = model.params()[3].name.clone();
        let before = model.clone();
        let mut adam = Adam::new(AdamConfig::default(), &model);
        let err = adam.step(&mut model).unwrap_err();
        assert!(err.contains(&name));
        for (p, q) in model.params().iter().zip(before.params()) {
            assert_eq!(p.value, q.value);
        }
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn fresh_model_loss_equals_mixture_loss() {
        let mut trainer = Trainer::new(toy_config()).unwrap();
        let batch = trainer.batch_for(0).unwrap();
        let expected: f64 = batch
            .iter()
            .map(|e| -objective::si_sdr_clipped(&e.mixture.samples, &e.target.samples).unwrap().value_db)
            .sum::<f64>()
            / batch.len() as f64;
        let loss = trainer.train_step(&batch).unwrap();
        assert!((loss - expected).abs() < 1e-3, "{loss} vs {expected}");
    }

    #[test]
    fn batch_of_one_and_fresh_eval_is_zero() {
        let mut cfg = toy_config();
        cfg.batch_size = 1;
        let mut trainer = Trainer::new(cfg).unwrap();
        assert_eq!(trainer.evaluate().unwrap(), 0.0);
        let batch = trainer.batch_for(0).unwrap();
        assert_eq!(batch.len(), 1);
        assert!(trainer.train_step(&batch).unwrap().is_finite());
        assert_eq!(trainer.step, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut t = Trainer::new(toy_config()).unwrap();
            for s in 0..3 {
                let b = t.batch_for(s).unwrap();
                t.train_step(&b).unwrap();
            }
            t.model
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pools_respect_family_filters() {
        let mut cfg = toy_config();
        cfg.dataset = DatasetSpec::Synthetic(SyntheticCorpus {
            families: 4,
            recordings_per_family: 3,
            duration_s: 0.5,
            sample_rate: 8000,
            seed: 1,
        });
        cfg.train_families = Some(vec!["tone_low".into(), "tone_high".into()]);
        cfg.eval_families = Some(vec!["noise_low".into(), "noise_high".into()]);
        let recs = cfg.dataset.load(1024).unwrap();
        let pools = build_pools(&cfg, recs).unwrap();
        assert_eq!(datagen::family_ids(&pools.train), vec!["tone_low", "tone_high"]);
        assert_eq!(datagen::family_ids(&pools.eval), vec!["noise_low", "noise_high"]);
        assert_eq!(pools.train.len(), 4);
        assert_eq!(pools.eval.len(), 6);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_config();
        cfg.clip_len = 300;
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let mut cfg = toy_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
