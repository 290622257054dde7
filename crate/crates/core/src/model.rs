//! Conditioning encoder, embedding aggregation, FiLM and the conditioned
//! wave-to-wave U-Net.
//!
//! Activations are `[B, C, T]`. With `n` downsampling factors the channel
//! width after encoder block `i` is `base_channels * 2^(i + 1)`; the decoder
//! mirrors it. Parameter names are dotted paths such as
//! `gen.dec1.res.2.norm.gamma`.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{BatchNormStats, ConvSpec, Element, NormMode, Parameter, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input length {len} is not a positive multiple of {multiple}")]
    Length { len: usize, multiple: usize },
    #[error("attention aggregation in training needs the target audio")]
    MissingTarget,
    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Group,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Maxpool,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmSites {
    DecoderAndBottleneck,
    DecoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub embedding_dim: usize,
    pub downsample_factors: Vec<usize>,
    pub residual_dilations: Vec<usize>,
    pub residual_kernel: usize,
    pub boundary_conv_kernel: usize,
    pub norm: NormKind,
    /// Channels per group for group normalization.
    pub group_size: usize,
    pub aggregation: Aggregation,
    pub film_sites: FilmSites,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            embedding_dim: 256,
            downsample_factors: vec![2, 2, 8, 8],
            residual_dilations: vec![1, 3, 9],
            residual_kernel: 3,
            boundary_conv_kernel: 7,
            norm: NormKind::Group,
            group_size: 16,
            aggregation: Aggregation::Maxpool,
            film_sites: FilmSites::DecoderAndBottleneck,
        }
    }
}

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const L2_EPS: f64 = 1e-12;

impl ModelConfig {
    /// Desk-scale model: 8 base channels, 64-dimensional embeddings.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            embedding_dim: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.base_channels == 0 || self.embedding_dim == 0 || self.group_size == 0 {
            return fail("base_channels, embedding_dim and group_size must be positive".into());
        }
        if self.downsample_factors.is_empty() || self.downsample_factors.contains(&0) {
            return fail(format!("downsample_factors must be non-empty and positive, got {:?}", self.downsample_factors));
        }
        if self.residual_dilations.contains(&0) {
            return fail(format!("residual_dilations must be positive, got {:?}", self.residual_dilations));
        }
        for (name, k) in [("residual_kernel", self.residual_kernel), ("boundary_conv_kernel", self.boundary_conv_kernel)] {
            if k % 2 == 0 {
                return fail(format!("{name} must be odd, got {k}"));
            }
        }
        Ok(())
    }

    /// Input lengths must be multiples of this (the total downsampling).
    pub fn sample_multiple(&self) -> usize {
        self.downsample_factors.iter().product()
    }

    /// Channel width entering encoder block `i` (`i = n` is the bottleneck).
    pub fn channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.downsample_factors.len())
    }

    /// Group count for `channels`: `channels / group_size`, at least one,
    /// lowered until it divides `channels`.
    pub fn groups(&self, channels: usize) -> usize {
        let mut g = (channels / self.group_size).max(1);
        while !channels.is_multiple_of(g) {
            g -= 1;
        }
        g
    }

    /// All channel widths scaled by `factor`.
    pub fn scale_channels(&self, factor: f64) -> Result<Self> {
        let scaled = self.base_channels as f64 * factor;
        if !(scaled >= 1.0 && scaled.fract() == 0.0) {
            return Err(ModelError::Config(format!(
                "factor {factor} turns {} base channels into {scaled}",
                self.base_channels
            )));
        }
        Ok(Self {
            base_channels: scaled as usize,
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Specs<'c> {
    cfg: &'c ModelConfig,
    list: Vec<ParamSpec>,
    norms: Vec<(String, usize)>,
}

impl Specs<'_> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.list.push(ParamSpec { name, shape, init });
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.gamma"), vec![c], Init::Ones);
        self.push(format!("{name}.beta"), vec![c], Init::Zeros);
        self.norms.push((name.to_string(), c));
    }

    fn conv_norm(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        self.push(format!("{name}.w"), vec![c_out, c_in, k], Init::FanIn(c_in * k));
        self.norm(&format!("{name}.norm"), c_out);
    }

    fn residual(&mut self, name: &str, c: usize) {
        for r in 0..self.cfg.residual_dilations.len() {
            self.conv_norm(&format!("{name}.{r}"), c, c, self.cfg.residual_kernel);
        }
    }

    fn encoder(&mut self, prefix: &str) {
        let cfg = self.cfg;
        self.conv_norm(&format!("{prefix}.in"), cfg.channels(0), 1, cfg.boundary_conv_kernel);
        for (i, &s) in cfg.downsample_factors.iter().enumerate() {
            let c = cfg.channels(i);
            self.residual(&format!("{prefix}.block{i}.res"), c);
            self.conv_norm(&format!("{prefix}.block{i}.down"), 2 * c, c, 2 * s);
        }
    }

    fn film(&mut self, name: &str, c: usize) {
        let d = self.cfg.embedding_dim;
        self.push(format!("{name}.w"), vec![2 * c, d], Init::Zeros);
        self.push(format!("{name}.b"), vec![2 * c], Init::Zeros);
    }
}

/// Parameter layout in canonical order, plus the normalization layers
/// `(name, channels)` that carry batch-norm statistics.
pub fn parameter_specs(cfg: &ModelConfig) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut s = Specs {
        cfg,
        list: Vec::new(),
        norms: Vec::new(),
    };
    let (top, d, k) = (cfg.bottleneck_channels(), cfg.embedding_dim, cfg.boundary_conv_kernel);

    s.encoder("cond");
    s.push("cond.out.w".into(), vec![d, top, k], Init::FanIn(top * k));
    s.push("cond.out.b".into(), vec![d], Init::Zeros);

    s.encoder("gen.enc");
    s.conv_norm("gen.bottleneck", top, top, k);
    if cfg.film_sites == FilmSites::DecoderAndBottleneck {
        s.film("gen.bottleneck.film", top);
    }
    let n = cfg.downsample_factors.len();
    for j in 0..n {
        let i = n - 1 - j;
        let (c_in, c_out, stride) = (cfg.channels(i + 1), cfg.channels(i), cfg.downsample_factors[i]);
        // transposed conv weight is [C_in, C_out, k]; each output sees k/stride taps per input channel
        s.push(format!("gen.dec{j}.up.w"), vec![c_in, c_out, 2 * stride], Init::FanIn(c_in * 2));
        s.norm(&format!("gen.dec{j}.up.norm"), c_out);
        s.residual(&format!("gen.dec{j}.res"), c_out);
        s.film(&format!("gen.dec{j}.film"), c_out);
    }
    let c0 = cfg.channels(0);
    s.push("gen.out.w".into(), vec![1, c0, k], Init::Zeros);
    s.push("gen.out.b".into(), vec![1], Init::Zeros);
    (s.list, s.norms)
}

/// Model parameters and batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Element> {
    config: ModelConfig,
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
    bn_stats: BTreeMap<String, BatchNormStats<F>>,
}

impl<F: Element> Model<F> {
    /// Fresh model. Conv weights are fan-in scaled uniform, norm gains one,
    /// and the FiLM projections and output conv are zero, so the untrained
    /// generator returns its input unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, _) = parameter_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = specs
            .iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data: Vec<F> = match spec.init {
                    Init::Zeros => vec![F::zero(); n],
                    Init::Ones => vec![F::one(); n],
                    Init::FanIn(fan_in) => {
                        let bound = (3.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| F::from_f64_lossy(rng.random_range(-bound..bound))).collect()
                    }
                };
                (spec.name.clone(), Tensor::new(&spec.shape, data).expect("spec shape"))
            })
            .collect();
        Self::from_tensors(config, values, None)
    }

    /// Assembles a model from named tensors in canonical order; errors name
    /// the first tensor that is missing, extra or misshapen.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Tensor<F>)>,
        bn_stats: Option<BTreeMap<String, BatchNormStats<F>>>,
    ) -> Result<Self> {
        config.validate()?;
        let (specs, norms) = parameter_specs(&config);
        if let Some(extra) = tensors.get(specs.len()) {
            return Err(ModelError::Parameter {
                name: extra.0.clone(),
                reason: "not part of this configuration".into(),
            });
        }
        let mut params = Vec::with_capacity(specs.len());
        let mut given = tensors.into_iter();
        for spec in &specs {
            let Some((name, value)) = given.next() else {
                return Err(ModelError::Parameter {
                    name: spec.name.clone(),
                    reason: "missing".into(),
                });
            };
            if name != spec.name {
                return Err(ModelError::Parameter {
                    name: spec.name.clone(),
                    reason: format!("found {name} in its place"),
                });
            }
            if value.shape() != spec.shape.as_slice() {
                return Err(ModelError::Parameter {
                    name,
                    reason: format!("shape {:?}, configuration expects {:?}", value.shape(), spec.shape),
                });
            }
            params.push(Parameter::new(name, value));
        }
        let bn_stats = match (config.norm, bn_stats) {
            (NormKind::Group, _) => BTreeMap::new(),
            (NormKind::Batch, Some(stats)) => {
                for (name, c) in &norms {
                    match stats.get(name) {
                        Some(s) if s.mean.len() == *c && s.var.len() == *c => {}
                        _ => {
                            return Err(ModelError::Parameter {
                                name: name.clone(),
                                reason: format!("missing or misshapen running statistics for {c} channels"),
                            })
                        }
                    }
                }
                stats
            }
            (NormKind::Batch, None) => norms.into_iter().map(|(n, c)| (n, BatchNormStats::new(c))).collect(),
        };
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self {
            config,
            params,
            index,
            bn_stats,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<F>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn bn_stats(&self) -> &BTreeMap<String, BatchNormStats<F>> {
        &self.bn_stats
    }

    pub fn set_bn_stats(&mut self, stats: BTreeMap<String, BatchNormStats<F>>) {
        self.bn_stats = stats;
    }

    /// Same model in another element type.
    pub fn cast<G: Element>(&self) -> Model<G> {
        let cast_vec = |v: &[F]| v.iter().map(|x| G::from_f64_lossy(x.to_f64_lossy())).collect();
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(|p| Parameter::new(p.name.clone(), p.value.cast())).collect(),
            index: self.index.clone(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BatchNormStats {
                            mean: cast_vec(&s.mean),
                            var: cast_vec(&s.var),
                            initialized: s.initialized,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Records every parameter as a tracked leaf on `tape`.
    pub fn bind<'m>(&'m self, tape: &'m Tape<F>, mode: NormMode) -> Graph<'m, F> {
        let vars = self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        self.bind_vars(tape, vars, mode)
    }

    /// Binds caller-provided vars (one per parameter, canonical order).
    pub fn bind_vars<'m>(&'m self, tape: &'m Tape<F>, vars: Vec<Var>, mode: NormMode) -> Graph<'m, F> {
        assert_eq!(vars.len(), self.params.len(), "one var per parameter");
        Graph {
            model: self,
            tape,
            vars,
            mode,
            bn: self.bn_stats.clone(),
        }
    }

    fn batch_input(&self, tape: &Tape<F>, clips: &[&[F]]) -> Result<Var> {
        let len = clips.first().map_or(0, |c| c.len());
        let m = self.config.sample_multiple();
        if len == 0 || !len.is_multiple_of(m) {
            return Err(ModelError::Length { len, multiple: m });
        }
        if let Some(bad) = clips.iter().find(|c| c.len() != len) {
            return Err(ModelError::Length { len: bad.len(), multiple: m });
        }
        let data: Vec<F> = clips.iter().flat_map(|c| c.iter().copied()).collect();
        Ok(tape.constant(Tensor::new(&[clips.len(), 1, len], data)?))
    }

    /// Per-frame embeddings `[d, T / M]` of one clip (inference mode).
    pub fn embed_sequence(&self, audio: &[F]) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let mut g = self.bind(&tape, NormMode::Eval);
        let x = self.batch_input(&tape, &[audio])?;
        let seq = g.encode(x)?;
        let value = tape.value(seq).clone();
        let (d, frames) = (value.shape()[1], value.shape()[2]);
        Ok(value.reshape(&[d, frames])?)
    }

    /// Conditioning vector of a reference clip. Attention mode addresses the
    /// reference with its own max-pooled embedding.
    pub fn conditioning(&self, reference: &[F]) -> Result<Vec<F>> {
        let tape = Tape::new();
        let mut g = self.bind(&tape, NormMode::Eval);
        let x = self.batch_input(&tape, &[reference])?;
        let v = g.conditioning_vector(x, None)?;
        let out = tape.value(v).data().to_vec();
        Ok(out)
    }

    /// Generator output for `mixture` under conditioning vector `v`.
    pub fn separate(&self, mixture: &[F], v: &[F]) -> Result<Vec<F>> {
        let tape = Tape::new();
        let mut g = self.bind(&tape, NormMode::Eval);
        let x = self.batch_input(&tape, &[mixture])?;
        let v = tape.constant(Tensor::new(&[1, v.len()], v.to_vec())?);
        let y = g.generator(x, v)?;
        let out = tape.value(y).data().to_vec();
        Ok(out)
    }

    /// Extracts the kind of sound in `reference` from `mixture`.
    pub fn filter(&self, mixture: &[F], reference: &[F]) -> Result<Vec<F>> {
        let v = self.conditioning(reference)?;
        self.separate(mixture, &v)
    }

    /// Batched inference: `(mixture, reference)` pairs of equal length.
    pub fn filter_batch(&self, mixtures: &[&[F]], references: &[&[F]]) -> Result<Vec<Vec<F>>> {
        let tape = Tape::new();
        let mut g = self.bind(&tape, NormMode::Eval);
        let x = self.batch_input(&tape, mixtures)?;
        let c = self.batch_input(&tape, references)?;
        let v = g.conditioning_vector(c, None)?;
        let y = g.generator(x, v)?;
        let value = tape.value(y);
        let t = value.shape()[2];
        Ok(value.data().chunks(t).map(<[F]>::to_vec).collect())
    }
}

/// A model bound to a tape for one forward pass.
pub struct Graph<'m, F: Element> {
    model: &'m Model<F>,
    tape: &'m Tape<F>,
    vars: Vec<Var>,
    mode: NormMode,
    bn: BTreeMap<String, BatchNormStats<F>>,
}

impl<'m, F: Element> Graph<'m, F> {
    pub fn tape(&self) -> &'m Tape<F> {
        self.tape
    }

    /// Parameter vars in canonical order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Batch-norm statistics after this pass (updated in training mode).
    pub fn finish(self) -> BTreeMap<String, BatchNormStats<F>> {
        self.bn
    }

    fn p(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ModelError::Parameter {
                name: name.to_string(),
                reason: "not defined by the configuration".into(),
            })
    }

    fn cfg(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn check_len(&self, x: Var) -> Result<()> {
        let shape = self.tape.shape(x);
        let len = shape.last().copied().unwrap_or(0);
        let m = self.cfg().sample_multiple();
        if len == 0 || len % m != 0 {
            return Err(ModelError::Length { len, multiple: m });
        }
        Ok(())
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let t = self.tape;
        let (gamma, beta) = (self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?);
        let eps = F::from_f64_lossy(NORM_EPS);
        match self.cfg().norm {
            NormKind::Group => {
                let c = t.shape(x)[1];
                Ok(t.group_norm(x, self.cfg().groups(c), gamma, beta, eps)?)
            }
            NormKind::Batch => {
                let stats = self.bn.get_mut(name).ok_or_else(|| ModelError::Parameter {
                    name: name.to_string(),
                    reason: "no running statistics".into(),
                })?;
                Ok(t.batch_norm(x, stats, self.mode, gamma, beta, eps, F::from_f64_lossy(BN_MOMENTUM))?)
            }
        }
    }

    fn conv_norm(&mut self, x: Var, name: &str, spec: ConvSpec) -> Result<Var> {
        let y = self.tape.conv1d(x, self.p(&format!("{name}.w"))?, None, spec)?;
        let y = self.norm(y, &format!("{name}.norm"))?;
        Ok(self.tape.elu(y))
    }

    fn residual(&mut self, x: Var, name: &str) -> Result<Var> {
        let mut h = x;
        for (r, &dilation) in self.cfg().residual_dilations.iter().enumerate() {
            h = self.conv_norm(h, &format!("{name}.{r}"), ConvSpec::same(1, dilation))?;
        }
        Ok(self.tape.add(x, h)?)
    }

    /// Shared encoder trunk; returns the output of every block.
    fn trunk(&mut self, x: Var, prefix: &str) -> Result<Vec<Var>> {
        self.check_len(x)?;
        let mut h = self.conv_norm(x, &format!("{prefix}.in"), ConvSpec::same(1, 1))?;
        let mut taps = Vec::new();
        for (i, &s) in self.cfg().downsample_factors.iter().enumerate() {
            h = self.residual(h, &format!("{prefix}.block{i}.res"))?;
            h = self.conv_norm(h, &format!("{prefix}.block{i}.down"), ConvSpec::same(s, 1))?;
            taps.push(h);
        }
        Ok(taps)
    }

    /// Conditioning encoder: `[B, 1, T] -> [B, d, T / M]`, every frame unit norm.
    pub fn encode(&mut self, x: Var) -> Result<Var> {
        let top = *self.trunk(x, "cond")?.last().expect("at least one block");
        let y = self.tape.conv1d(top, self.p("cond.out.w")?, Some(self.p("cond.out.b")?), ConvSpec::same(1, 1))?;
        Ok(self.tape.l2_normalize(y, F::from_f64_lossy(L2_EPS)))
    }

    fn normalize_rows(&self, v: Var) -> Result<Var> {
        let t = self.tape;
        let shape = t.shape(v);
        let col = t.reshape(v, &[shape[0], shape[1], 1])?;
        let col = t.l2_normalize(col, F::from_f64_lossy(L2_EPS));
        Ok(t.reshape(col, &shape)?)
    }

    /// Per-dimension max over frames, renormalized: `[B, d, F] -> [B, d]`.
    pub fn aggregate_maxpool(&self, seq: Var) -> Result<Var> {
        let pooled = self.tape.global_max_pool_time(seq)?;
        self.normalize_rows(pooled)
    }

    /// Softmax of frame/query cosine similarities weights the frames:
    /// `[B, d, F] x [B, d] -> [B, d]`. Frames and query are unit norm, so
    /// cosine similarity is the dot product.
    pub fn aggregate_attention(&self, seq: Var, query: Var) -> Result<Var> {
        let t = self.tape;
        let weights = t.softmax(t.frame_dot(seq, query)?);
        let mixed = t.frame_mix(seq, weights)?;
        self.normalize_rows(mixed)
    }

    /// Conditioning vector `[B, d]`. In attention mode the query is the
    /// max-pooled target embedding when `target` is given (training) and the
    /// reference's own max-pooled embedding otherwise.
    pub fn conditioning_vector(&mut self, cond: Var, target: Option<Var>) -> Result<Var> {
        let seq = self.encode(cond)?;
        match self.cfg().aggregation {
            Aggregation::Maxpool => self.aggregate_maxpool(seq),
            Aggregation::Attention => {
                let query = match target {
                    Some(x) => {
                        let tseq = self.encode(x)?;
                        self.aggregate_maxpool(tseq)?
                    }
                    None => self.aggregate_maxpool(seq)?,
                };
                self.aggregate_attention(seq, query)
            }
        }
    }

    /// Same as [`Graph::conditioning_vector`] but refuses to fall back to
    /// self-addressing when attention mode lacks a target.
    pub fn conditioning_vector_train(&mut self, cond: Var, target: Option<Var>) -> Result<Var> {
        if self.cfg().aggregation == Aggregation::Attention && target.is_none() {
            return Err(ModelError::MissingTarget);
        }
        self.conditioning_vector(cond, target)
    }

    /// `(gamma, beta)` of one FiLM site, each `[B, C]`, with `gamma = 1 + proj`.
    pub fn film_params(&self, v: Var, name: &str, channels: usize) -> Result<(Var, Var)> {
        let t = self.tape;
        let proj = t.linear(v, self.p(&format!("{name}.w"))?, self.p(&format!("{name}.b"))?)?;
        let gamma = t.add_scalar(t.narrow(proj, 0, channels)?, F::one());
        let beta = t.narrow(proj, channels, channels)?;
        Ok((gamma, beta))
    }

    fn film(&self, x: Var, v: Var, name: &str) -> Result<Var> {
        let c = self.tape.shape(x)[1];
        let (gamma, beta) = self.film_params(v, name, c)?;
        Ok(self.tape.film(x, gamma, beta)?)
    }

    /// Conditioned U-Net: `[B, 1, T]` mixture and `[B, d]` conditioning to a
    /// `[B, 1, T]` estimate.
    pub fn generator(&mut self, mixture: Var, v: Var) -> Result<Var> {
        let t = self.tape;
        let taps = self.trunk(mixture, "gen.enc")?;
        let top = *taps.last().expect("at least one block");
        let mut h = self.conv_norm(top, "gen.bottleneck", ConvSpec::same(1, 1))?;
        if self.cfg().film_sites == FilmSites::DecoderAndBottleneck {
            h = self.film(h, v, "gen.bottleneck.film")?;
        }
        let n = taps.len();
        for j in 0..n {
            let i = n - 1 - j;
            let stride = self.cfg().downsample_factors[i];
            h = t.add(h, taps[i])?;
            h = t.conv_transpose1d(h, self.p(&format!("gen.dec{j}.up.w"))?, None, stride)?;
            h = self.norm(h, &format!("gen.dec{j}.up.norm"))?;
            h = t.elu(h);
            h = self.residual(h, &format!("gen.dec{j}.res"))?;
            h = self.film(h, v, &format!("gen.dec{j}.film"))?;
        }
        let y = t.conv1d(h, self.p("gen.out.w")?, Some(self.p("gen.out.b")?), ConvSpec::same(1, 1))?;
        Ok(t.add(y, mixture)?)
    }
}

/// `gamma[c] * x[c, :] + beta[c]` on a `[C, T]` tensor.
pub fn film_apply<F: Element>(x: &Tensor<F>, gamma: &[F], beta: &[F]) -> Result<Tensor<F>> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::from_slice(&[gamma.len()], gamma)?);
    let b = tape.constant(Tensor::from_slice(&[beta.len()], beta)?);
    let y = tape.film(xv, g, b)?;
    let out = tape.value(y).clone();
    Ok(out)
}
