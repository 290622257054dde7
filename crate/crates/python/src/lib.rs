//! Python bindings: models, checkpoints, training, evaluation and the audio
//! helpers, exchanging waveforms as lists of floats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::PyErr;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyo3::pymodule]
mod pysoundfilter {
    use std::collections::BTreeMap;
    use std::path::PathBuf;

    use pyo3::prelude::*;

    use super::{runtime_err, value_err};
    use soundfilter::audio::{self, AudioClip};
    use soundfilter::cli;
    use soundfilter::datagen::SyntheticCorpus;
    use soundfilter::model::{self, ModelConfig};
    use soundfilter::objective;
    use soundfilter::trainer::{self, TrainConfig, Trainer};

    /// Conditional filtering model (f32 weights).
    #[pyclass(module = "pysoundfilter")]
    struct Model {
        inner: model::Model<f32>,
    }

    #[pymethods]
    impl Model {
        /// Freshly initialized model; the defaults are the desk-scale size.
        #[new]
        #[pyo3(signature = (base_channels = 8, embedding_dim = 64, seed = 0))]
        fn new(base_channels: usize, embedding_dim: usize, seed: u64) -> PyResult<Self> {
            let config = ModelConfig {
                base_channels,
                embedding_dim,
                ..ModelConfig::default()
            };
            let inner = model::Model::new(config, seed).map_err(value_err)?;
            Ok(Self { inner })
        }

        /// Model stored in a training checkpoint.
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            let ckpt = trainer::load_checkpoint(&path).map_err(value_err)?;
            Ok(Self { inner: ckpt.model })
        }

        #[getter]
        fn num_parameters(&self) -> usize {
            self.inner.num_parameters()
        }

        /// Input lengths must be multiples of this.
        #[getter]
        fn sample_multiple(&self) -> usize {
            self.inner.config().sample_multiple()
        }

        /// Model configuration as JSON.
        fn config_json(&self) -> String {
            serde_json::to_string(self.inner.config()).expect("config serializes")
        }

        /// Unit-norm conditioning vector of a reference clip.
        fn conditioning(&self, reference: Vec<f32>) -> PyResult<Vec<f32>> {
            self.inner.conditioning(&reference).map_err(value_err)
        }

        /// Extracts the kind of sound in `reference` from `mixture`.
        fn filter(&self, mixture: Vec<f32>, reference: Vec<f32>) -> PyResult<Vec<f32>> {
            self.inner.filter(&mixture, &reference).map_err(value_err)
        }
    }

    #[pyfunction]
    fn si_sdr(estimate: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
        Ok(objective::si_sdr(&estimate, &target).map_err(value_err)?.value_db)
    }

    /// Soft-clipped SI-SDR in dB, bounded above by 30.
    #[pyfunction]
    fn si_sdr_clipped(estimate: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
        Ok(objective::si_sdr_clipped(&estimate, &target).map_err(value_err)?.value_db)
    }

    #[pyfunction]
    fn si_sdr_improvement(estimate: Vec<f64>, mixture: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
        objective::si_sdr_improvement(&estimate, &mixture, &target).map_err(value_err)
    }

    /// Returns `(mixture, noise_gain)` with the target at `snr_db` over the
    /// scaled noise.
    #[pyfunction]
    #[pyo3(signature = (target, noise, snr_db, sample_rate = 16000))]
    fn mix_at_snr(target: Vec<f32>, noise: Vec<f32>, snr_db: f64, sample_rate: u32) -> PyResult<(Vec<f32>, f64)> {
        let t = AudioClip::new(target, sample_rate, "target").map_err(value_err)?;
        let n = AudioClip::new(noise, sample_rate, "noise").map_err(value_err)?;
        let m = audio::mix_at_snr(&t, &n, snr_db).map_err(value_err)?;
        Ok((m.mixture.samples, m.noise_gain))
    }

    /// Returns `(samples, sample_rate)`.
    #[pyfunction]
    fn load_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
        let clip = audio::load_wav(&path).map_err(value_err)?;
        Ok((clip.samples, clip.sample_rate))
    }

    /// Writes 16-bit PCM; returns the number of clipped samples.
    #[pyfunction]
    fn save_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<usize> {
        let clip = AudioClip::new(samples, sample_rate, "python").map_err(value_err)?;
        audio::save_wav(&clip, &path).map_err(value_err)
    }

    /// Synthetic corpus as `(recording_id, family_id, samples)` triples.
    #[pyfunction]
    #[pyo3(signature = (families = 8, recordings_per_family = 25, duration_s = 4.0, sample_rate = 8000, seed = 0))]
    fn synthetic_corpus(
        families: usize,
        recordings_per_family: usize,
        duration_s: f64,
        sample_rate: u32,
        seed: u64,
    ) -> PyResult<Vec<(String, String, Vec<f32>)>> {
        let corpus = SyntheticCorpus {
            families,
            recordings_per_family,
            duration_s,
            sample_rate,
            seed,
        };
        let recs = corpus.build().map_err(value_err)?;
        Ok(recs.into_iter().map(|r| (r.recording_id, r.family_id, r.clip.samples)).collect())
    }

    /// Trains from a JSON config (same schema as the command line) and
    /// returns the `(step, train_loss_db, eval_sisdri_db)` log rows.
    #[pyfunction]
    fn train(config_json: &str, out_dir: PathBuf) -> PyResult<Vec<(u64, f64, f64)>> {
        let config: TrainConfig = cli::parse_config(config_json).map_err(value_err)?;
        config.validate().map_err(value_err)?;
        let mut t = Trainer::new(config).map_err(value_err)?;
        let outcome = t.run(&out_dir).map_err(runtime_err)?;
        Ok(outcome.rows)
    }

    /// Evaluates a checkpoint on `n` held-out 0 dB mixtures. Returns the
    /// mean and standard deviation of SI-SDRi and the per-family means.
    #[pyfunction]
    #[pyo3(signature = (checkpoint, n = 64))]
    fn evaluate(checkpoint: PathBuf, n: usize) -> PyResult<(f64, f64, BTreeMap<String, f64>)> {
        let report = cli::cmd_eval(&checkpoint, None, n, None, false).map_err(value_err)?;
        let per_family = report.per_family.iter().map(|(k, s)| (k.clone(), s.mean)).collect();
        Ok((report.sisdri.mean, report.sisdri.std, per_family))
    }
}
