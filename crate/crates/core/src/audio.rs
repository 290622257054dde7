//! Waveform container, WAV I/O, cropping and SNR-controlled mixing.

use std::ops::Range;
use std::path::Path;

use log::warn;
use rand::Rng;
use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported format ({reason})")]
    Unsupported { path: String, reason: String },
    #[error("empty audio: {0}")]
    Empty(String),
    #[error("clip of {len} samples is too short for {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("crop length must be positive")]
    ZeroLength,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("{0} has zero energy")]
    ZeroEnergy(&'static str),
    #[error("non-finite sample in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono waveform. Samples are nominally in `[-1, 1]` but may exceed it
/// internally (mixtures); clamping happens only on WAV export.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if samples.is_empty() {
            return Err(AudioError::Empty(source_id));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(AudioError::NonFinite(source_id));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples, accumulated in `f64`.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn slice(&self, range: Range<usize>) -> AudioClip {
        AudioClip {
            samples: self.samples[range].to_vec(),
            sample_rate: self.sample_rate,
            source_id: self.source_id.clone(),
        }
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }
}

pub fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum()
}

/// Extra facts about a decoded WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub channels: u16,
    pub bits_per_sample: u16,
}

/// Reads 16-bit PCM. Multi-channel audio is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(AudioClip, WavInfo)> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let wav_err = |source| AudioError::Wav {
        path: display.clone(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::Unsupported {
            path: display,
            reason: format!("{:?} {}-bit, expected 16-bit PCM", spec.sample_format, spec.bits_per_sample),
        });
    }
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    let channels = usize::from(spec.channels.max(1));
    if raw.len() < channels {
        return Err(AudioError::Empty(display));
    }
    if channels > 1 {
        warn!("{display}: {channels} channels averaged to mono");
    }
    let samples = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f32 = frame.iter().map(|&s| f32::from(s) / 32768.0).sum();
            sum / channels as f32
        })
        .collect();
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let clip = AudioClip::new(samples, spec.sample_rate, stem)?;
    Ok((
        clip,
        WavInfo {
            channels: spec.channels,
            bits_per_sample: spec.bits_per_sample,
        },
    ))
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    read_wav(path).map(|(clip, _)| clip)
}

/// Writes 16-bit PCM mono. Returns the number of samples clamped to `[-1, 1]`.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if clip.samples.is_empty() {
        return Err(AudioError::Empty(display));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wav_err = |source| AudioError::Wav {
        path: display.clone(),
        source,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    let mut clamped = 0;
    for &s in &clip.samples {
        if !(-1.0..=1.0).contains(&s) {
            clamped += 1;
        }
        let q = (f64::from(s.clamp(-1.0, 1.0)) * 32768.0).round().clamp(-32768.0, 32767.0);
        writer.write_sample(q as i16).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)?;
    if clamped > 0 {
        warn!("{display}: {clamped} samples clamped to [-1, 1]");
    }
    Ok(clamped)
}

/// Start offset of a uniformly placed window of `len` samples.
pub fn random_crop_range<R: Rng + ?Sized>(clip_len: usize, len: usize, rng: &mut R) -> Result<Range<usize>> {
    if len == 0 {
        return Err(AudioError::ZeroLength);
    }
    if clip_len < len {
        return Err(AudioError::TooShort {
            len: clip_len,
            needed: len,
        });
    }
    let start = rng.random_range(0..=clip_len - len);
    Ok(start..start + len)
}

pub fn random_crop<R: Rng + ?Sized>(clip: &AudioClip, len: usize, rng: &mut R) -> Result<AudioClip> {
    Ok(clip.slice(random_crop_range(clip.len(), len, rng)?))
}

/// Two non-overlapping windows of `len` samples in random order.
///
/// The gap layout is sampled uniformly: the free `clip_len - 2 len` samples
/// are split into before / between / after segments.
pub fn disjoint_crop_ranges<R: Rng + ?Sized>(
    clip_len: usize,
    len: usize,
    rng: &mut R,
) -> Result<(Range<usize>, Range<usize>)> {
    if len == 0 {
        return Err(AudioError::ZeroLength);
    }
    if clip_len < 2 * len {
        return Err(AudioError::TooShort {
            len: clip_len,
            needed: 2 * len,
        });
    }
    let slack = clip_len - 2 * len;
    let mut a = rng.random_range(0..=slack);
    let mut b = rng.random_range(0..=slack);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let first = a..a + len;
    let second = b + len..b + 2 * len;
    if rng.random_bool(0.5) {
        Ok((first, second))
    } else {
        Ok((second, first))
    }
}

pub fn disjoint_crops<R: Rng + ?Sized>(clip: &AudioClip, len: usize, rng: &mut R) -> Result<(AudioClip, AudioClip)> {
    let (a, b) = disjoint_crop_ranges(clip.len(), len, rng)?;
    Ok((clip.slice(a), clip.slice(b)))
}

/// Result of [`mix_at_snr`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: AudioClip,
    pub noise_gain: f64,
    /// `noise_gain * noise`, the component actually added to the target.
    pub scaled_noise: Vec<f32>,
}

/// Gain `g = sqrt(E_t / (E_n 10^(snr/10)))` on the noise, and
/// `mixture = target + g * noise`. Energies are over the whole crop.
pub fn mix_at_snr(target: &AudioClip, noise: &AudioClip, snr_db: f64) -> Result<Mixture> {
    if target.len() != noise.len() {
        return Err(AudioError::LengthMismatch(target.len(), noise.len()));
    }
    if target.sample_rate != noise.sample_rate {
        return Err(AudioError::RateMismatch(target.sample_rate, noise.sample_rate));
    }
    let (e_t, e_n) = (target.energy(), noise.energy());
    if e_t == 0.0 {
        return Err(AudioError::ZeroEnergy("target"));
    }
    if e_n == 0.0 {
        return Err(AudioError::ZeroEnergy("noise"));
    }
    let gain = (e_t / (e_n * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled_noise: Vec<f32> = noise.samples.iter().map(|&n| (f64::from(n) * gain) as f32).collect();
    let samples = target.samples.iter().zip(&scaled_noise).map(|(&t, &n)| t + n).collect();
    Ok(Mixture {
        mixture: AudioClip {
            samples,
            sample_rate: target.sample_rate,
            source_id: format!("{}+{}", target.source_id, noise.source_id),
        },
        noise_gain: gain,
        scaled_noise,
    })
}

/// `10 log10(E_a / E_b)`.
pub fn si_ratio_db(a: &[f32], b: &[f32]) -> Result<f64> {
    let (ea, eb) = (energy(a), energy(b));
    if ea == 0.0 {
        return Err(AudioError::ZeroEnergy("first signal"));
    }
    if eb == 0.0 {
        return Err(AudioError::ZeroEnergy("second signal"));
    }
    Ok(10.0 * (ea / eb).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples, 8000, "t").unwrap()
    }

    fn write_i16(path: &Path, channels: u16, values: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &v in values {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn load_scales_by_32768() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_i16(&p, 1, &[0, 16384, -32768]);
        let c = load_wav(&p).unwrap();
        assert_eq!(c.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(c.sample_rate, 8000);
    }

    #[test]
    fn load_rejects_empty_missing_and_non_pcm16() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.wav");
        write_i16(&p, 1, &[]);
        assert!(matches!(load_wav(&p), Err(AudioError::Empty(_))));
        assert!(load_wav(dir.path().join("missing.wav")).is_err());

        let f = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&f, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_wav(&f), Err(AudioError::Unsupported { .. })));

        let t = dir.path().join("trunc.wav");
        write_i16(&t, 1, &[1, 2, 3, 4, 5, 6, 7, 8]);
        let bytes = std::fs::read(&t).unwrap();
        std::fs::write(&t, &bytes[..bytes.len() - 5]).unwrap();
        assert!(load_wav(&t).is_err());
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_i16(&p, 2, &[16384, 0, -16384, -16384]);
        let (c, info) = read_wav(&p).unwrap();
        assert_eq!(info.channels, 2);
        assert_eq!(c.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn save_round_trip_and_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        let c = clip(vec![0.0, 0.5, -0.25, 0.123_456]);
        assert_eq!(save_wav(&c, &p).unwrap(), 0);
        let back = load_wav(&p).unwrap();
        for (a, b) in c.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
        let loud = clip(vec![1.5, -2.0, 0.0]);
        assert_eq!(save_wav(&loud, &p).unwrap(), 2);
        let back = load_wav(&p).unwrap();
        assert!((back.samples[0] - 1.0).abs() <= 1.0 / 32768.0);
        assert_eq!(back.samples[1], -1.0);

        let empty = AudioClip {
            samples: vec![],
            sample_rate: 8000,
            source_id: "e".into(),
        };
        assert!(save_wav(&empty, &p).is_err());
        assert!(save_wav(&c, dir.path().join("no/such/dir.wav")).is_err());
    }

    #[test]
    fn crop_examples() {
        let c = clip((1..=10).map(|v| v as f32).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&c, 10, &mut rng).unwrap(), c);
        let a = random_crop(&c, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&c, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(random_crop(&c, 0, &mut rng), Err(AudioError::ZeroLength)));
        assert!(random_crop(&c, 11, &mut rng).is_err());
    }

    #[test]
    fn disjoint_crop_examples() {
        let c = clip((0..8).map(|v| v as f32).collect());
        let mut seen_orders = [false; 2];
        for seed in 0..32 {
            let (a, b) = disjoint_crops(&c, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let halves = (vec![0.0, 1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0, 7.0]);
            if (a.samples.clone(), b.samples.clone()) == halves {
                seen_orders[0] = true;
            } else {
                assert_eq!((b.samples, a.samples), halves);
                seen_orders[1] = true;
            }
        }
        assert_eq!(seen_orders, [true, true]);
        let short = clip(vec![0.0; 7]);
        assert!(disjoint_crops(&short, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn disjoint_intervals_never_intersect() {
        for seed in 0..1000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = 1 + (seed as usize % 50);
            let clip_len = 2 * len + (seed as usize * 7) % 100;
            let (a, b) = disjoint_crop_ranges(clip_len, len, &mut rng).unwrap();
            assert_eq!(a.len(), len);
            assert_eq!(b.len(), len);
            assert!(a.end <= clip_len && b.end <= clip_len);
            assert!(a.end <= b.start || b.end <= a.start, "{a:?} {b:?}");
        }
    }

    #[test]
    fn mixing_examples() {
        let t = clip(vec![0.5, -0.5, 0.5, -0.5]);
        let n = clip(vec![0.5, 0.5, -0.5, -0.5]);
        let m = mix_at_snr(&t, &n, 0.0).unwrap();
        assert_eq!(m.noise_gain, 1.0);
        let m = mix_at_snr(&t, &n, 20.0 * 2f64.log10()).unwrap();
        assert!((m.noise_gain - 0.5).abs() < 1e-15);
        let silent = clip(vec![0.0; 4]);
        assert!(matches!(mix_at_snr(&t, &silent, 0.0), Err(AudioError::ZeroEnergy(_))));
        assert!(mix_at_snr(&t, &clip(vec![0.1; 3]), 0.0).is_err());
    }

    #[test]
    fn ratio_examples() {
        let a = [0.3f32, -0.2, 0.1];
        assert_eq!(si_ratio_db(&a, &a).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v / 10f32.sqrt()).collect();
        assert!((si_ratio_db(&a, &b).unwrap() - 10.0).abs() < 1e-5);
        assert!(si_ratio_db(&a, &[0.0, 0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn mixing_hits_requested_snr(
            seed in any::<u64>(),
            snr in -4.0f64..4.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = clip((0..256).map(|_| rng.random_range(-0.5f32..0.5)).collect());
            let n = clip((0..256).map(|_| rng.random_range(-0.5f32..0.5)).collect());
            let m = mix_at_snr(&t, &n, snr).unwrap();
            let achieved = si_ratio_db(&t.samples, &m.scaled_noise).unwrap();
            prop_assert!((achieved - snr).abs() < 1e-6);
            // mixture is exactly the f32 sum of the two components
            for ((&mv, &tv), &nv) in m.mixture.samples.iter().zip(&t.samples).zip(&m.scaled_noise) {
                prop_assert_eq!(mv.to_bits(), (tv + nv).to_bits());
            }
        }
    }
}
