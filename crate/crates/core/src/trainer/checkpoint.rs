//! Binary checkpoint format.
//!
//! ```text
//! "SFLT" | u32 version | u32 len, config JSON
//! u32 count, tensor entries            (parameters)
//! u64 adam t | u32 count, tensor entries  (first moments, then second moments)
//! u32 count, per layer: name, u8 initialized, u32 C, C x f32 mean, C x f32 var
//! u64 step | u64 data seed | u64 next example index | f64 loss sum | u64 loss count
//! ```
//!
//! A tensor entry is `u32 name len, name, u32 rank, rank x u64 dims,
//! f32 payload`. All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Adam, TrainConfig};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{BatchNormStats, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SFLT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {CHECKPOINT_VERSION}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam,
    pub step: u64,
    /// Data RNG state: examples are drawn from `(data_seed, index)` streams,
    /// so the seed and the next index determine every future batch.
    pub data_seed: u64,
    pub next_example: u64,
    /// Training-loss sum and count since the last log row.
    pub loss_acc: (f64, u64),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn entry(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.str(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.f32s(data);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.buf.len()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn entry(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape overflow")))?;
        let data = self.f32s(n)?;
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
    fn entries(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32()?;
        (0..n).map(|_| self.entry()).collect()
    }
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&serde_json::to_string(&ckpt.config).expect("config serializes"));
    let params = ckpt.model.params();
    w.u32(params.len() as u32);
    for p in params {
        w.entry(&p.name, p.value.shape(), p.value.data());
    }
    w.u64(ckpt.adam.t);
    w.u32(2 * params.len() as u32);
    for (prefix, bufs) in [("m", &ckpt.adam.m), ("v", &ckpt.adam.v)] {
        for (p, buf) in params.iter().zip(bufs) {
            w.entry(&format!("{prefix}.{}", p.name), p.value.shape(), buf);
        }
    }
    let stats = ckpt.model.bn_stats();
    w.u32(stats.len() as u32);
    for (name, s) in stats {
        w.str(name);
        w.u8(u8::from(s.initialized));
        w.u32(s.mean.len() as u32);
        w.f32s(&s.mean);
        w.f32s(&s.var);
    }
    w.u64(ckpt.step);
    w.u64(ckpt.data_seed);
    w.u64(ckpt.next_example);
    w.f64(ckpt.loss_acc.0);
    w.u64(ckpt.loss_acc.1);
    w.0
}

fn decode(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 || r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config: TrainConfig = serde_json::from_str(&r.str()?).map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let params = r.entries()?;
    let t = r.u64()?;
    let moments = r.entries()?;
    let n_stats = r.u32()?;
    let mut stats = BTreeMap::new();
    for _ in 0..n_stats {
        let name = r.str()?;
        let initialized = r.u8()? != 0;
        let c = r.u32()? as usize;
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        stats.insert(name, BatchNormStats { mean, var, initialized });
    }
    let step = r.u64()?;
    let data_seed = r.u64()?;
    let next_example = r.u64()?;
    let loss_acc = (r.f64()?, r.u64()?);
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let model_config = expected.cloned().unwrap_or_else(|| config.model.clone());
    let bn = (!stats.is_empty()).then_some(stats);
    let model = Model::from_tensors(model_config, params, bn)?;
    let n = model.params().len();
    if moments.len() != 2 * n {
        return Err(CheckpointError::Malformed(format!("{} optimizer buffers for {n} parameters", moments.len())));
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for (i, (name, tensor)) in moments.into_iter().enumerate() {
        let p = &model.params()[i % n];
        let prefix = if i < n { "m" } else { "v" };
        if name != format!("{prefix}.{}", p.name) || tensor.shape() != p.value.shape() {
            return Err(CheckpointError::Malformed(format!("optimizer buffer {name} does not match parameter {}", p.name)));
        }
        if i < n {
            m.push(tensor.into_data());
        } else {
            v.push(tensor.into_data());
        }
    }
    Ok(Checkpoint {
        adam: Adam {
            config: config.optimizer,
            t,
            m,
            v,
        },
        config,
        model,
        step,
        data_seed,
        next_example,
        loss_acc,
    })
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::write(&tmp, encode(ckpt)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&buf, None)
}

impl Checkpoint {
    /// Loads parameters into `expected` instead of the stored model config;
    /// the error names the first tensor that does not fit.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        decode(&buf, Some(expected))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(self)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        decode(buf, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NormKind;
    use crate::trainer::AdamConfig;

    fn sample(norm: NormKind) -> Checkpoint {
        let mut config = TrainConfig::desk();
        config.model = ModelConfig {
            base_channels: 4,
            embedding_dim: 8,
            norm,
            ..ModelConfig::default()
        };
        let mut model = Model::new(config.model.clone(), 3).unwrap();
        let mut stats = model.bn_stats().clone();
        for s in stats.values_mut() {
            s.mean.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.1);
            s.initialized = true;
        }
        model.set_bn_stats(stats);
        let mut adam = Adam::new(AdamConfig::default(), &model);
        adam.t = 7;
        adam.m[0][0] = 0.25;
        adam.v[1][0] = 1e-7;
        Checkpoint {
            config,
            model,
            adam,
            step: 7,
            data_seed: 0,
            next_example: 56,
            loss_acc: (-3.5, 2),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for norm in [NormKind::Group, NormKind::Batch] {
            let ckpt = sample(norm);
            let bytes = ckpt.to_bytes();
            assert_eq!(&bytes[..4], b"SFLT");
            assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
        }
    }

    #[test]
    fn corrupt_magic_version_and_truncation() {
        let bytes = sample(NormKind::Group).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&[]), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn mismatched_config_names_first_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&sample(NormKind::Group), &path).unwrap();
        let other = ModelConfig {
            base_channels: 8,
            embedding_dim: 8,
            ..ModelConfig::default()
        };
        let err = Checkpoint::load_for(&path, &other).unwrap_err();
        assert!(err.to_string().contains("cond.in.w"), "{err}");
        assert!(load_checkpoint(dir.path().join("missing.ckpt")).is_err());
    }
}
