//! Synthetic single-source sound families and assembly of training and
//! evaluation examples.
//!
//! A training example takes two crops of one recording (target and
//! conditioning) and mixes the target with a crop of a different recording
//! at a random SNR. Evaluation examples use disjoint target/conditioning crops
//! and a fixed 0 dB mix. Every example is a pure function of
//! `(dataset seed, example index)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioClip, AudioError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("dataset needs at least {needed} recordings, has {have}")]
    TooFewRecordings { needed: usize, have: usize },
    #[error("recording {id} has {len} samples, needs {needed}")]
    RecordingTooShort { id: String, len: usize, needed: usize },
    #[error("{families} families cannot form {splits} splits")]
    TooFewFamilies { families: usize, splits: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Generator and parameter ranges of one synthetic sound family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    /// Five harmonics with `1/h` amplitudes and slow amplitude modulation.
    HarmonicTone { f0_hz: [f64; 2] },
    /// White noise through a two-pole resonator.
    NarrowbandNoise { center_hz: [f64; 2], bandwidth_hz: [f64; 2] },
    /// Periodic exponentially decaying tone bursts.
    ClickTrain { rate_hz: [f64; 2], resonance_hz: [f64; 2] },
    /// Repeating linear sweeps inside a band.
    Chirp { band_hz: [f64; 2], period_s: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceFamily {
    pub family_id: String,
    #[serde(flatten)]
    pub kind: FamilyKind,
}

impl SourceFamily {
    pub fn new(id: &str, kind: FamilyKind) -> Self {
        Self {
            family_id: id.to_string(),
            kind,
        }
    }
}

/// The eight default families. Their dominant frequency regions are disjoint
/// at 8 kHz sampling.
pub fn default_families() -> Vec<SourceFamily> {
    use FamilyKind::*;
    vec![
        SourceFamily::new("tone_low", HarmonicTone { f0_hz: [100.0, 125.0] }),
        SourceFamily::new("tone_high", HarmonicTone { f0_hz: [700.0, 760.0] }),
        SourceFamily::new(
            "noise_low",
            NarrowbandNoise {
                center_hz: [500.0, 560.0],
                bandwidth_hz: [40.0, 80.0],
            },
        ),
        SourceFamily::new(
            "noise_high",
            NarrowbandNoise {
                center_hz: [3000.0, 3150.0],
                bandwidth_hz: [100.0, 200.0],
            },
        ),
        SourceFamily::new(
            "clicks_mid",
            ClickTrain {
                rate_hz: [6.0, 12.0],
                resonance_hz: [1700.0, 1900.0],
            },
        ),
        SourceFamily::new(
            "clicks_high",
            ClickTrain {
                rate_hz: [15.0, 25.0],
                resonance_hz: [3600.0, 3800.0],
            },
        ),
        SourceFamily::new(
            "chirp_mid",
            Chirp {
                band_hz: [850.0, 1200.0],
                period_s: [0.2, 0.5],
            },
        ),
        SourceFamily::new(
            "chirp_high",
            Chirp {
                band_hz: [2350.0, 2700.0],
                period_s: [0.2, 0.5],
            },
        ),
    ]
}

/// Concrete generator parameters of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthParams {
    HarmonicTone {
        f0_hz: f64,
        phases: Vec<f64>,
        am_rate_hz: f64,
        am_depth: f64,
    },
    NarrowbandNoise {
        center_hz: f64,
        bandwidth_hz: f64,
    },
    ClickTrain {
        rate_hz: f64,
        resonance_hz: f64,
        decay_s: f64,
    },
    Chirp {
        low_hz: f64,
        high_hz: f64,
        period_s: f64,
    },
}

const HARMONICS: usize = 5;
const PEAK: f32 = 0.5;

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

impl SynthParams {
    pub fn sample<R: Rng>(kind: &FamilyKind, rng: &mut R) -> Self {
        match kind {
            FamilyKind::HarmonicTone { f0_hz } => SynthParams::HarmonicTone {
                f0_hz: uniform(rng, *f0_hz),
                phases: (0..HARMONICS).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
                am_rate_hz: rng.random_range(0.5..2.0),
                am_depth: rng.random_range(0.1..0.4),
            },
            FamilyKind::NarrowbandNoise { center_hz, bandwidth_hz } => SynthParams::NarrowbandNoise {
                center_hz: uniform(rng, *center_hz),
                bandwidth_hz: uniform(rng, *bandwidth_hz),
            },
            FamilyKind::ClickTrain { rate_hz, resonance_hz } => SynthParams::ClickTrain {
                rate_hz: uniform(rng, *rate_hz),
                resonance_hz: uniform(rng, *resonance_hz),
                decay_s: rng.random_range(0.003..0.008),
            },
            FamilyKind::Chirp { band_hz, period_s } => {
                let width = band_hz[1] - band_hz[0];
                let low = band_hz[0] + rng.random_range(0.0..0.25) * width;
                let high = band_hz[1] - rng.random_range(0.0..0.25) * width;
                SynthParams::Chirp {
                    low_hz: low,
                    high_hz: high,
                    period_s: uniform(rng, *period_s),
                }
            }
        }
    }

    /// Renders `len` samples at `sample_rate`, peak-normalized to 0.5.
    /// `rng` drives the stochastic generators (noise).
    pub fn render<R: Rng>(&self, len: usize, sample_rate: u32, rng: &mut R) -> Vec<f32> {
        let sr = f64::from(sample_rate);
        let nyquist = sr / 2.0;
        let mut out: Vec<f64> = match self {
            SynthParams::HarmonicTone {
                f0_hz,
                phases,
                am_rate_hz,
                am_depth,
            } => {
                let am_phase = phases[0];
                (0..len)
                    .map(|i| {
                        let t = i as f64 / sr;
                        let tone: f64 = phases
                            .iter()
                            .enumerate()
                            .map(|(k, &phi)| (k + 1, phi))
                            .filter(|&(h, _)| (h as f64) * f0_hz < nyquist)
                            .map(|(h, phi)| (2.0 * PI * h as f64 * f0_hz * t + phi).sin() / h as f64)
                            .sum();
                        tone * (1.0 + am_depth * (2.0 * PI * am_rate_hz * t + am_phase).sin())
                    })
                    .collect()
            }
            SynthParams::NarrowbandNoise { center_hz, bandwidth_hz } => {
                // two-pole resonator, unit gain at the center frequency
                let r = (-PI * bandwidth_hz / sr).exp();
                let theta = 2.0 * PI * center_hz / sr;
                let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
                let warmup = (sr * 0.1) as usize;
                let (mut y1, mut y2) = (0.0f64, 0.0f64);
                let mut y = Vec::with_capacity(len);
                for i in 0..len + warmup {
                    let x: f64 = rng.random_range(-1.0..1.0);
                    let v = (1.0 - r) * x + a1 * y1 + a2 * y2;
                    y2 = y1;
                    y1 = v;
                    if i >= warmup {
                        y.push(v);
                    }
                }
                y
            }
            SynthParams::ClickTrain {
                rate_hz,
                resonance_hz,
                decay_s,
            } => {
                let period = sr / rate_hz;
                let offset = rng.random_range(0.0..period);
                (0..len)
                    .map(|i| {
                        // time since the most recent click
                        let pos = i as f64 + period - offset;
                        let since = (pos % period) / sr;
                        (-since / decay_s).exp() * (2.0 * PI * resonance_hz * since).sin()
                    })
                    .collect()
            }
            SynthParams::Chirp {
                low_hz,
                high_hz,
                period_s,
            } => {
                let slope = (high_hz - low_hz) / period_s;
                let mut phase = rng.random_range(0.0..2.0 * PI);
                let start = rng.random_range(0.0..*period_s);
                (0..len)
                    .map(|i| {
                        let t = (i as f64 / sr + start) % period_s;
                        let f = low_hz + slope * t;
                        let v = phase.sin();
                        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
                        v
                    })
                    .collect()
            }
        };
        // zero-mean, then peak-normalize
        let mean = out.iter().sum::<f64>() / len.max(1) as f64;
        out.iter_mut().for_each(|v| *v -= mean);
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if peak > 0.0 { f64::from(PEAK) / peak } else { 0.0 };
        out.iter().map(|&v| (v * scale) as f32).collect()
    }
}

/// Where a recording's audio came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordingSource {
    Synth(SynthParams),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub recording_id: String,
    pub family_id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub source: RecordingSource,
    pub clip: AudioClip,
}

/// Renders one deterministic recording of `family`.
pub fn synth_clip(family: &SourceFamily, seed: u64, duration_s: f64, sample_rate: u32) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = SynthParams::sample(&family.kind, &mut rng);
    render_recording(family, format!("{}-{seed:016x}", family.family_id), seed, params, duration_s, sample_rate)
}

fn render_recording(
    family: &SourceFamily,
    recording_id: String,
    seed: u64,
    params: SynthParams,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Recording> {
    let len = (duration_s * f64::from(sample_rate)).round() as usize;
    if len == 0 {
        return Err(DataError::Config(format!("duration {duration_s} s renders no samples")));
    }
    // the noise stream is separate from the parameter stream
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let samples = params.render(len, sample_rate, &mut noise_rng);
    Ok(Recording {
        clip: AudioClip::new(samples, sample_rate, recording_id.clone())?,
        recording_id,
        family_id: family.family_id.clone(),
        seed,
        duration_s,
        source: RecordingSource::Synth(params),
    })
}

/// Desk-scale synthetic corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCorpus {
    #[serde(default = "SyntheticCorpus::default_families")]
    pub families: usize,
    #[serde(default = "SyntheticCorpus::default_recordings")]
    pub recordings_per_family: usize,
    #[serde(default = "SyntheticCorpus::default_duration")]
    pub duration_s: f64,
    #[serde(default = "SyntheticCorpus::default_rate")]
    pub sample_rate: u32,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticCorpus {
    fn default_families() -> usize {
        8
    }
    fn default_recordings() -> usize {
        25
    }
    fn default_duration() -> f64 {
        4.0
    }
    fn default_rate() -> u32 {
        8000
    }

    /// Recordings ordered by family then index; recording `i` of family `f`
    /// is seeded from stream `f * 2^20 + i` of the corpus seed.
    pub fn build(&self) -> Result<Vec<Recording>> {
        let all = default_families();
        if self.families == 0 || self.families > all.len() {
            return Err(DataError::Config(format!(
                "families must be in 1..={}, got {}",
                all.len(),
                self.families
            )));
        }
        let mut out = Vec::with_capacity(self.families * self.recordings_per_family);
        for (f, family) in all.iter().take(self.families).enumerate() {
            for i in 0..self.recordings_per_family {
                let mut seeder = ChaCha8Rng::seed_from_u64(self.seed);
                seeder.set_stream(((f as u64) << 20) + i as u64);
                let seed = seeder.random::<u64>();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = SynthParams::sample(&family.kind, &mut rng);
                out.push(render_recording(
                    family,
                    format!("{}-{i:03}", family.family_id),
                    seed,
                    params,
                    self.duration_s,
                    self.sample_rate,
                )?);
            }
        }
        Ok(out)
    }
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            families: 8,
            recordings_per_family: 25,
            duration_s: 4.0,
            sample_rate: 8000,
            seed: 0,
        }
    }
}

/// One supervised triple.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub index: u64,
    pub target: AudioClip,
    pub conditioning: AudioClip,
    pub mixture: AudioClip,
    /// `noise_gain * noise crop`, so `mixture = target + scaled_noise`.
    pub scaled_noise: Vec<f32>,
    pub snr_db: f64,
    pub target_recording_id: String,
    pub noise_recording_id: String,
    pub target_family: String,
    pub noise_family: String,
    pub target_range: std::ops::Range<usize>,
    pub conditioning_range: std::ops::Range<usize>,
}

/// Which recordings may serve as noise for a given target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    /// Any other recording, including the target's own family.
    #[default]
    AnyOther,
    CrossFamily,
    SameFamily,
}

/// RNG for example `index` of a dataset seeded with `seed`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn check_dataset(recordings: &[Recording], needed_len: usize) -> Result<()> {
    if recordings.len() < 2 {
        return Err(DataError::TooFewRecordings {
            needed: 2,
            have: recordings.len(),
        });
    }
    if let Some(r) = recordings.iter().find(|r| r.clip.len() < needed_len) {
        return Err(DataError::RecordingTooShort {
            id: r.recording_id.clone(),
            len: r.clip.len(),
            needed: needed_len,
        });
    }
    Ok(())
}

fn pick_noise<R: Rng>(recordings: &[Recording], target: usize, policy: NoisePolicy, rng: &mut R) -> Result<usize> {
    let family = &recordings[target].family_id;
    let candidates: Vec<usize> = (0..recordings.len())
        .filter(|&i| i != target)
        .filter(|&i| match policy {
            NoisePolicy::AnyOther => true,
            NoisePolicy::CrossFamily => &recordings[i].family_id != family,
            NoisePolicy::SameFamily => &recordings[i].family_id == family,
        })
        .collect();
    candidates
        .get(rng.random_range(0..candidates.len().max(1)))
        .copied()
        .ok_or_else(|| DataError::Config(format!("no noise recording satisfies {policy:?} for family {family}")))
}

#[allow(clippy::too_many_arguments)]
fn assemble<R: Rng>(
    recordings: &[Recording],
    index: u64,
    rng: &mut R,
    len: usize,
    disjoint: bool,
    snr_db: Option<[f64; 2]>,
    policy: NoisePolicy,
) -> Result<TrainingExample> {
    check_dataset(recordings, if disjoint { 2 * len } else { len })?;
    let ti = rng.random_range(0..recordings.len());
    let target_rec = &recordings[ti];
    let (target_range, conditioning_range) = if disjoint {
        audio::disjoint_crop_ranges(target_rec.clip.len(), len, rng)?
    } else {
        (
            audio::random_crop_range(target_rec.clip.len(), len, rng)?,
            audio::random_crop_range(target_rec.clip.len(), len, rng)?,
        )
    };
    let ni = pick_noise(recordings, ti, policy, rng)?;
    let noise_rec = &recordings[ni];
    let noise = audio::random_crop(&noise_rec.clip, len, rng)?;
    let snr = match snr_db {
        Some([lo, hi]) if lo < hi => rng.random_range(lo..=hi),
        Some([lo, _]) => lo,
        None => 0.0,
    };
    let target = target_rec.clip.slice(target_range.clone());
    let conditioning = target_rec.clip.slice(conditioning_range.clone());
    let mix = audio::mix_at_snr(&target, &noise, snr)?;
    Ok(TrainingExample {
        index,
        target,
        conditioning,
        mixture: mix.mixture,
        scaled_noise: mix.scaled_noise,
        snr_db: snr,
        target_recording_id: target_rec.recording_id.clone(),
        noise_recording_id: noise_rec.recording_id.clone(),
        target_family: target_rec.family_id.clone(),
        noise_family: noise_rec.family_id.clone(),
        target_range,
        conditioning_range,
    })
}

/// Training triple: target and conditioning are independent random crops of
/// one recording (they may overlap), the noise is a crop of another
/// recording, and the SNR is uniform in `snr_range_db`.
pub fn make_training_example<R: Rng>(
    recordings: &[Recording],
    index: u64,
    rng: &mut R,
    len: usize,
    snr_range_db: [f64; 2],
) -> Result<TrainingExample> {
    make_training_example_with(recordings, index, rng, len, snr_range_db, NoisePolicy::AnyOther)
}

pub fn make_training_example_with<R: Rng>(
    recordings: &[Recording],
    index: u64,
    rng: &mut R,
    len: usize,
    snr_range_db: [f64; 2],
    policy: NoisePolicy,
) -> Result<TrainingExample> {
    if snr_range_db[0] > snr_range_db[1] {
        return Err(DataError::Config(format!("empty SNR range {snr_range_db:?}")));
    }
    assemble(recordings, index, rng, len, false, Some(snr_range_db), policy)
}

/// Evaluation triple: disjoint target/conditioning crops, mixed at 0 dB.
pub fn make_eval_example<R: Rng>(recordings: &[Recording], index: u64, rng: &mut R, len: usize) -> Result<TrainingExample> {
    make_eval_example_with(recordings, index, rng, len, NoisePolicy::AnyOther)
}

pub fn make_eval_example_with<R: Rng>(
    recordings: &[Recording],
    index: u64,
    rng: &mut R,
    len: usize,
    policy: NoisePolicy,
) -> Result<TrainingExample> {
    assemble(recordings, index, rng, len, true, None, policy)
}

/// Evaluation set of `n` examples: example `i` uses [`example_rng`]`(seed, i)`.
pub fn eval_set(recordings: &[Recording], seed: u64, n: usize, len: usize, policy: NoisePolicy) -> Result<Vec<TrainingExample>> {
    (0..n as u64)
        .map(|i| make_eval_example_with(recordings, i, &mut example_rng(seed, i), len, policy))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub index: usize,
    pub train_families: Vec<String>,
    pub eval_families: Vec<String>,
}

/// Partitions the families into `k` near-even groups; split `i` evaluates
/// on group `i` and trains on the rest.
pub fn build_split_manifest(families: &[String], k: usize, seed: u64) -> Result<Vec<Split>> {
    let unique: BTreeSet<&String> = families.iter().collect();
    if k < 2 || unique.len() < k {
        return Err(DataError::TooFewFamilies {
            families: unique.len(),
            splits: k,
        });
    }
    let mut shuffled: Vec<String> = unique.into_iter().cloned().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len();
    let groups: Vec<Vec<String>> = (0..k)
        .map(|g| {
            let (start, end) = (g * n / k, (g + 1) * n / k);
            let mut group = shuffled[start..end].to_vec();
            group.sort();
            group
        })
        .collect();
    Ok((0..k)
        .map(|i| {
            let mut train: Vec<String> = groups
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != i)
                .flat_map(|(_, group)| group.iter().cloned())
                .collect();
            train.sort();
            Split {
                index: i,
                train_families: train,
                eval_families: groups[i].clone(),
            }
        })
        .collect())
}

/// Outcome of [`scan_wav_directory`].
#[derive(Debug, Clone, PartialEq)]
pub struct WavScan {
    pub recordings: Vec<Recording>,
    pub skipped_short: usize,
}

pub const UNLABELED_FAMILY: &str = "unlabeled";

/// Loads every WAV under `root` that is at least `2 * len` samples long.
/// Files inside a subdirectory take the subdirectory name as family id;
/// files directly under `root` are [`UNLABELED_FAMILY`].
pub fn scan_wav_directory(root: impl AsRef<Path>, len: usize) -> Result<WavScan> {
    let root = root.as_ref();
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() {
            let family = path.file_name().unwrap().to_string_lossy().into_owned();
            for inner in fs::read_dir(&path).map_err(io_err(&path))? {
                let p = inner.map_err(io_err(&path))?.path();
                if is_wav(&p) {
                    files.push((family.clone(), p));
                }
            }
        } else if is_wav(&path) {
            files.push((UNLABELED_FAMILY.to_string(), path));
        }
    }
    files.sort();
    if files.is_empty() {
        warn!("{}: no WAV files found", root.display());
    }
    let mut recordings = Vec::new();
    let mut skipped_short = 0;
    for (family, path) in files {
        let clip = audio::load_wav(&path)?;
        if clip.len() < 2 * len {
            skipped_short += 1;
            continue;
        }
        let stem = path.file_stem().unwrap().to_string_lossy();
        recordings.push(Recording {
            recording_id: format!("{family}/{stem}"),
            family_id: family,
            seed: 0,
            duration_s: clip.duration_s(),
            source: RecordingSource::Path(path),
            clip,
        });
    }
    if skipped_short > 0 {
        warn!("{}: skipped {skipped_short} files shorter than {} samples", root.display(), 2 * len);
    }
    Ok(WavScan {
        recordings,
        skipped_short,
    })
}

fn is_wav(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub recording_id: String,
    pub family_id: String,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub source: RecordingSource,
}

impl From<&Recording> for ManifestRecord {
    fn from(r: &Recording) -> Self {
        Self {
            recording_id: r.recording_id.clone(),
            family_id: r.family_id.clone(),
            seed: r.seed,
            duration_s: r.duration_s,
            sample_rate: r.clip.sample_rate,
            source: r.source.clone(),
        }
    }
}

/// Writes one JSON object per line.
pub fn write_manifest(recordings: &[Recording], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in recordings {
        let line = serde_json::to_string(&ManifestRecord::from(r)).expect("manifest record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a manifest and re-materializes every recording (re-rendering
/// synthetic ones, loading WAV paths).
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Recording>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let clip = match &rec.source {
            RecordingSource::Synth(params) => {
                let len = (rec.duration_s * f64::from(rec.sample_rate)).round() as usize;
                let mut noise_rng = ChaCha8Rng::seed_from_u64(rec.seed);
                noise_rng.set_stream(1);
                AudioClip::new(params.render(len, rec.sample_rate, &mut noise_rng), rec.sample_rate, rec.recording_id.clone())?
            }
            RecordingSource::Path(p) => {
                let mut clip = audio::load_wav(p)?;
                clip.source_id = rec.recording_id.clone();
                clip
            }
        };
        out.push(Recording {
            recording_id: rec.recording_id,
            family_id: rec.family_id,
            seed: rec.seed,
            duration_s: rec.duration_s,
            source: rec.source,
            clip,
        });
    }
    Ok(out)
}

/// Distinct family ids in first-seen order.
pub fn family_ids(recordings: &[Recording]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in recordings {
        if !seen.contains(&r.family_id) {
            seen.push(r.family_id.clone());
        }
    }
    seen
}

/// Splits each family's recordings into `(train, held out)`, holding out the
/// last `holdout_per_family` recordings of every family.
pub fn holdout_split(recordings: &[Recording], holdout_per_family: usize) -> (Vec<Recording>, Vec<Recording>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for family in family_ids(recordings) {
        let members: Vec<&Recording> = recordings.iter().filter(|r| r.family_id == family).collect();
        let keep = members.len().saturating_sub(holdout_per_family);
        train.extend(members[..keep].iter().map(|r| (*r).clone()));
        held.extend(members[keep..].iter().map(|r| (*r).clone()));
    }
    (train, held)
}

pub fn filter_families(recordings: &[Recording], families: &[String]) -> Vec<Recording> {
    recordings
        .iter()
        .filter(|r| families.contains(&r.family_id))
        .cloned()
        .collect()
}
