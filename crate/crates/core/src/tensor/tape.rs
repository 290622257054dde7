use std::cell::{Ref, RefCell};

use super::conv::{self, ConvShapes, ConvSpec};
use super::norm::{self, BatchNormStats, NormCache, NormMode};
use super::{bct, Element, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// Receives the input values, the output value and the output gradient,
/// and returns one gradient per input (`None` when the input receives none).
pub trait CustomBackward<F: Element> {
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

enum Op<F: Element> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Matmul(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    ConvTranspose1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        cache: NormCache<F>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mode: NormMode,
        cache: NormCache<F>,
    },
    Elu(usize),
    Softmax(usize),
    L2Normalize {
        x: usize,
        eps: F,
        norms: Vec<F>,
    },
    MaxPoolTime {
        x: usize,
        argmax: Vec<usize>,
    },
    Film {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    FrameDot {
        frames: usize,
        query: usize,
    },
    FrameMix {
        frames: usize,
        weights: usize,
    },
    Narrow {
        x: usize,
        start: usize,
    },
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn CustomBackward<F>>,
    },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Records operations for reverse-mode differentiation.
///
/// Every op validates shapes and returns a new [`Var`]. Nodes are appended in
/// execution order, so the tape is already topologically sorted.
pub struct Tape<F: Element> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

/// `(outer, axis_len, inner)` view of the normalization axis used by
/// [`Tape::l2_normalize`]: axis 0 for rank 1, otherwise axis `rank - 2`.
fn column_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        1 => (1, shape[0], 1),
        r => {
            let outer: usize = shape[..r - 2].iter().product();
            (outer, shape[r - 2], shape[r - 1])
        }
    }
}

/// `(batch, d, T)` for frame tensors `[d, T]` / `[B, d, T]` with the matching
/// vector shape `[d]` / `[B, d]`.
fn frame_layout(op: &'static str, frames: &[usize], vector: &[usize], vec_is_time: bool) -> Result<(usize, usize, usize)> {
    let (b, d, t) = bct(op, frames)?;
    let expected: Vec<usize> = match (frames.len(), vec_is_time) {
        (2, false) => vec![d],
        (2, true) => vec![t],
        (_, false) => vec![b, d],
        (_, true) => vec![b, t],
    };
    if vector != expected.as_slice() {
        return Err(mismatch(op, frames, vector));
    }
    Ok((b, d, t))
}

impl<F: Element> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].requires_grad)
    }

    /// Input node. Leaves with `requires_grad` accumulate gradients.
    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> Ref<'_, Tensor<F>> {
        Ref::map(self.nodes.borrow(), |n| &n[var.0].value)
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.nodes.borrow()[var.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    /// Gradient accumulated on `var` by [`Tape::backward`].
    pub fn grad(&self, var: Var) -> Option<Tensor<F>> {
        self.nodes.borrow()[var.0].grad.clone()
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            if av.shape() != bv.shape() {
                return Err(mismatch(name, av.shape(), bv.shape()));
            }
            let data = super::kernels::vectorized(|| av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect());
            Tensor::new(av.shape(), data)?
        };
        let rg = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let value = self.map(a, |x| x * s);
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let value = self.map(a, |x| x + s);
        let rg = self.tracked(&[a.0]);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.tracked(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (s, n) = {
            let v = self.value(a);
            (v.sum(), v.len())
        };
        let rg = self.tracked(&[a.0]);
        self.push(Tensor::scalar(s / F::from_usize(n).unwrap()), Op::Mean(a.0), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.tracked(&[a.0]);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (&[m, k], &[k2, n]) = (av.shape(), bv.shape()) else {
                return Err(mismatch("matmul", av.shape(), bv.shape()));
            };
            if k != k2 {
                return Err(mismatch("matmul", av.shape(), bv.shape()));
            }
            let mut out = vec![F::zero(); m * n];
            F::gemm(m, k, n, F::one(), av.data(), (k as isize, 1), bv.data(), (n as isize, 1), F::zero(), &mut out, (n as isize, 1));
            Tensor::new(&[m, n], out)?
        };
        let rg = self.tracked(&[a.0, b.0]);
        Ok(self.push(value, Op::Matmul(a.0, b.0), rg))
    }

    /// `x W^T + b` for `x` of shape `[d_in]` or `[B, d_in]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let &[d_out, d_in] = wv.shape() else {
                return Err(invalid("linear", format!("weight must be rank 2, got {:?}", wv.shape())));
            };
            if bv.shape() != [d_out] {
                return Err(mismatch("linear", wv.shape(), bv.shape()));
            }
            let (rows, out_shape) = match *xv.shape() {
                [d] if d == d_in => (1, vec![d_out]),
                [r, d] if d == d_in => (r, vec![r, d_out]),
                _ => return Err(mismatch("linear", xv.shape(), wv.shape())),
            };
            let mut out: Vec<F> = (0..rows).flat_map(|_| bv.data().iter().copied()).collect();
            F::gemm(rows, d_in, d_out, F::one(), xv.data(), (d_in as isize, 1), wv.data(), (1, d_in as isize), F::one(), &mut out, (d_out as isize, 1));
            Tensor::new(&out_shape, out)?
        };
        let rg = self.tracked(&[x.0, w.0, b.0]);
        Ok(self.push(value, Op::Linear { x: x.0, w: w.0, b: b.0 }, rg))
    }

    fn conv_shapes(&self, op: &'static str, x: Var, w: Var, b: Option<Var>, transpose: bool) -> Result<(ConvShapes, bool)> {
        let nodes = self.nodes.borrow();
        let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
        let (batch, c_in, t_in) = bct(op, xv.shape())?;
        let &[w0, w1, kernel] = wv.shape() else {
            return Err(invalid(op, format!("weight must be rank 3, got {:?}", wv.shape())));
        };
        let (wc_in, c_out) = if transpose { (w0, w1) } else { (w1, w0) };
        if wc_in != c_in {
            return Err(mismatch(op, xv.shape(), wv.shape()));
        }
        if let Some(b) = b {
            let bv = &nodes[b.0].value;
            if bv.shape() != [c_out] {
                return Err(mismatch(op, wv.shape(), bv.shape()));
            }
        }
        Ok((
            ConvShapes {
                batch,
                c_in,
                c_out,
                kernel,
                t_in,
                t_out: 0,
            },
            xv.rank() == 2,
        ))
    }

    /// Cross-correlation of `x` (`[C_in, T]` or `[B, C_in, T]`) with
    /// `w` (`[C_out, C_in, k]`).
    pub fn conv1d(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (mut s, rank2) = self.conv_shapes("conv1d", x, w, b, false)?;
        s.t_out = conv::conv1d_output_len(s.t_in, s.kernel, &spec)?;
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv1d_forward(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                b.map(|b| nodes[b.0].value.data()),
                &s,
                &spec,
            )
        };
        let shape = if rank2 { vec![s.c_out, s.t_out] } else { vec![s.batch, s.c_out, s.t_out] };
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        let rg = self.tracked(&inputs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv1d { x: x.0, w: w.0, b: b.map(|b| b.0), spec }, rg))
    }

    /// Adjoint of a same-padded strided [`Tape::conv1d`]: `[C_in, T]` to
    /// `[C_out, T * stride]`, weight `[C_in, C_out, k]`.
    pub fn conv_transpose1d(&self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(invalid("conv_transpose1d", "stride must be positive"));
        }
        let (mut s, rank2) = self.conv_shapes("conv_transpose1d", x, w, b, true)?;
        s.t_out = s.t_in * stride;
        let out = {
            let nodes = self.nodes.borrow();
            conv::conv_transpose1d_forward(
                nodes[x.0].value.data(),
                nodes[w.0].value.data(),
                b.map(|b| nodes[b.0].value.data()),
                &s,
                stride,
            )
        };
        let shape = if rank2 { vec![s.c_out, s.t_out] } else { vec![s.batch, s.c_out, s.t_out] };
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        let rg = self.tracked(&inputs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConvTranspose1d { x: x.0, w: w.0, b: b.map(|b| b.0), stride }, rg))
    }

    fn check_affine(&self, op: &'static str, channels: usize, gamma: Var, beta: Var) -> Result<()> {
        for v in [gamma, beta] {
            let shape = self.shape(v);
            if shape != [channels] {
                return Err(mismatch(op, &[channels], &shape));
            }
        }
        Ok(())
    }

    /// Normalizes each group of `channels / groups` channels over
    /// `(channels in group, time)`, then applies a per-channel affine.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let dims = bct("group_norm", &self.shape(x))?;
        if groups == 0 || dims.1 % groups != 0 {
            return Err(invalid("group_norm", format!("{} channels not divisible into {groups} groups", dims.1)));
        }
        self.check_affine("group_norm", dims.1, gamma, beta)?;
        let (out, cache) = {
            let nodes = self.nodes.borrow();
            norm::group_norm_forward(
                nodes[x.0].value.data(),
                dims,
                groups,
                nodes[gamma.0].value.data(),
                nodes[beta.0].value.data(),
                eps,
            )
        };
        let shape = self.shape(x);
        let rg = self.tracked(&[x.0, gamma.0, beta.0]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::GroupNorm { x: x.0, gamma: gamma.0, beta: beta.0, groups, cache }, rg))
    }

    /// Per-channel normalization over `(batch, time)`. Training mode uses
    /// batch statistics and updates `stats`; eval mode uses `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: Var,
        stats: &mut BatchNormStats<F>,
        mode: NormMode,
        gamma: Var,
        beta: Var,
        eps: F,
        momentum: F,
    ) -> Result<Var> {
        let shape = self.shape(x);
        let dims = bct("batch_norm", &shape)?;
        let (batch, channels, time) = dims;
        self.check_affine("batch_norm", channels, gamma, beta)?;
        if stats.mean.len() != channels {
            return Err(invalid("batch_norm", format!("running stats hold {} channels, input has {channels}", stats.mean.len())));
        }
        let (mean, var) = match mode {
            NormMode::Train => {
                if batch * time < 2 {
                    return Err(invalid("batch_norm", "training mode needs more than one value per channel"));
                }
                let (mean, var) = norm::batch_moments(self.value(x).data(), dims);
                let n = F::from_usize(batch * time).unwrap();
                let unbias = n / (n - F::one());
                for c in 0..channels {
                    if stats.initialized {
                        stats.mean[c] = (F::one() - momentum) * stats.mean[c] + momentum * mean[c];
                        stats.var[c] = (F::one() - momentum) * stats.var[c] + momentum * var[c] * unbias;
                    } else {
                        stats.mean[c] = mean[c];
                        stats.var[c] = var[c] * unbias;
                    }
                }
                stats.initialized = true;
                (mean, var)
            }
            NormMode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let rstd: Vec<F> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let out = {
            let nodes = self.nodes.borrow();
            norm::channel_normalize(
                nodes[x.0].value.data(),
                dims,
                &mean,
                &rstd,
                nodes[gamma.0].value.data(),
                nodes[beta.0].value.data(),
            )
        };
        let rg = self.tracked(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, mode, cache: NormCache { mean, rstd } },
            rg,
        ))
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            Tensor::new(xv.shape(), F::elu_slice(xv.data())).expect("same shape")
        };
        let rg = self.tracked(&[x.0]);
        self.push(value, Op::Elu(x.0), rg)
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let value = {
            let xv = self.value(x);
            let n = *xv.shape().last().unwrap();
            let mut out = xv.data().to_vec();
            for row in out.chunks_mut(n) {
                let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut total = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            Tensor::new(xv.shape(), out).expect("same shape")
        };
        let rg = self.tracked(&[x.0]);
        self.push(value, Op::Softmax(x.0), rg)
    }

    /// `x / max(||x||, eps)`. For rank 1 the whole vector is normalized; for
    /// `[d, T]` and `[B, d, T]` every column (frame) is normalized over `d`.
    ///
    /// A zero column comes out as zeros (scaled by `1 / eps`).
    pub fn l2_normalize(&self, x: Var, eps: F) -> Var {
        let (value, norms) = {
            let xv = self.value(x);
            let (outer, d, inner) = column_layout(xv.shape());
            let data = xv.data();
            let mut out = data.to_vec();
            let mut norms = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * d * inner + i;
                    let mut sq = F::zero();
                    for k in 0..d {
                        sq += data[base + k * inner] * data[base + k * inner];
                    }
                    let denom = sq.sqrt().max(eps);
                    for k in 0..d {
                        out[base + k * inner] = data[base + k * inner] / denom;
                    }
                    norms.push(denom);
                }
            }
            (Tensor::new(xv.shape(), out).expect("same shape"), norms)
        };
        let rg = self.tracked(&[x.0]);
        self.push(value, Op::L2Normalize { x: x.0, eps, norms }, rg)
    }

    /// Maximum over the last (time) axis: `[d, T] -> [d]`, `[B, d, T] -> [B, d]`.
    /// Ties resolve to the first index.
    pub fn global_max_pool_time(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(invalid("global_max_pool_time", format!("need a time axis, got {shape:?}")));
        }
        let t = *shape.last().unwrap();
        let (values, argmax): (Vec<F>, Vec<usize>) = {
            let xv = self.value(x);
            xv.data()
                .chunks(t)
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    (row[best], best)
                })
                .unzip()
        };
        let rg = self.tracked(&[x.0]);
        Ok(self.push(Tensor::new(&shape[..shape.len() - 1], values)?, Op::MaxPoolTime { x: x.0, argmax }, rg))
    }

    /// Per-channel affine `gamma * x + beta` on `[C, T]` / `[B, C, T]`, with
    /// `gamma`, `beta` of shape `[C]` (shared) or `[B, C]` (per example).
    pub fn film(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x);
        let (b, c, t) = bct("film", &xs)?;
        for v in [gamma, beta] {
            let s = self.shape(v);
            if s != [c] && s != [b, c] {
                return Err(mismatch("film", &xs, &s));
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (nodes[x.0].value.data(), nodes[gamma.0].value.data(), nodes[beta.0].value.data());
            let mut out = vec![F::zero(); xv.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let g = gv[(bi * c + ci) % gv.len()];
                    let be = bv[(bi * c + ci) % bv.len()];
                    let row = (bi * c + ci) * t;
                    for k in row..row + t {
                        out[k] = g * xv[k] + be;
                    }
                }
            }
            Tensor::new(&xs, out)?
        };
        let rg = self.tracked(&[x.0, gamma.0, beta.0]);
        Ok(self.push(value, Op::Film { x: x.0, gamma: gamma.0, beta: beta.0 }, rg))
    }

    /// Dot product of every frame with a query: `[B, d, T] . [B, d] -> [B, T]`.
    pub fn frame_dot(&self, frames: Var, query: Var) -> Result<Var> {
        let fs = self.shape(frames);
        let (b, d, t) = frame_layout("frame_dot", &fs, &self.shape(query), false)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (e, q) = (nodes[frames.0].value.data(), nodes[query.0].value.data());
            let mut out = vec![F::zero(); b * t];
            for bi in 0..b {
                for k in 0..d {
                    let qv = q[bi * d + k];
                    let row = &e[(bi * d + k) * t..(bi * d + k + 1) * t];
                    for (o, &ev) in out[bi * t..(bi + 1) * t].iter_mut().zip(row) {
                        *o += ev * qv;
                    }
                }
            }
            let shape = if fs.len() == 2 { vec![t] } else { vec![b, t] };
            Tensor::new(&shape, out)?
        };
        let rg = self.tracked(&[frames.0, query.0]);
        Ok(self.push(value, Op::FrameDot { frames: frames.0, query: query.0 }, rg))
    }

    /// Weighted sum of frames: `[B, d, T] x [B, T] -> [B, d]`.
    pub fn frame_mix(&self, frames: Var, weights: Var) -> Result<Var> {
        let fs = self.shape(frames);
        let (b, d, t) = frame_layout("frame_mix", &fs, &self.shape(weights), true)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (e, w) = (nodes[frames.0].value.data(), nodes[weights.0].value.data());
            let mut out = vec![F::zero(); b * d];
            for bi in 0..b {
                let wrow = &w[bi * t..(bi + 1) * t];
                for k in 0..d {
                    let row = &e[(bi * d + k) * t..(bi * d + k + 1) * t];
                    out[bi * d + k] = row.iter().zip(wrow).fold(F::zero(), |acc, (&ev, &wv)| acc + ev * wv);
                }
            }
            let shape = if fs.len() == 2 { vec![d] } else { vec![b, d] };
            Tensor::new(&shape, out)?
        };
        let rg = self.tracked(&[frames.0, weights.0]);
        Ok(self.push(value, Op::FrameMix { frames: frames.0, weights: weights.0 }, rg))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        let n = *shape.last().unwrap();
        if len == 0 || start + len > n {
            return Err(invalid("narrow", format!("range {start}..{} outside axis of {n}", start + len)));
        }
        let value = {
            let xv = self.value(x);
            let data: Vec<F> = xv.data().chunks(n).flat_map(|row| row[start..start + len].iter().copied()).collect();
            let mut out_shape = shape.clone();
            *out_shape.last_mut().unwrap() = len;
            Tensor::new(&out_shape, data)?
        };
        let rg = self.tracked(&[x.0]);
        Ok(self.push(value, Op::Narrow { x: x.0, start }, rg))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&self, inputs: &[Var], value: Tensor<F>, rule: Box<dyn CustomBackward<F>>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.tracked(&ids);
        self.push(value, Op::Custom { inputs: ids, rule }, rg)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// Gradients accumulate into every tracked leaf (repeated calls add up
    /// until [`Tape::zero_grad`]); tracked leaves the loss does not reach get
    /// a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.all_finite() {
            return Err(TensorError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.shape(), vec![F::one()]).unwrap());

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            let contributions = super::kernels::vectorized(|| node_backward(&nodes, i, &g));
            for (parent, pg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }

        for (i, node) in nodes.iter_mut().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if !g.all_finite() {
                return Err(TensorError::NonFinite(format!("gradient of leaf {i}")));
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn like<F: Element>(t: &Tensor<F>, data: Vec<F>) -> Tensor<F> {
    Tensor::new(t.shape(), data).expect("gradient shape")
}

fn zip_map<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    like(a, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// Gradient contributions `(parent index, gradient)` of node `i`.
#[inline(always)]
fn node_backward<F: Element>(nodes: &[Node<F>], i: usize, g: &Tensor<F>) -> Vec<(usize, Tensor<F>)> {
    let val = |k: usize| &nodes[k].value;
    let wants = |k: usize| nodes[k].requires_grad;
    match &nodes[i].op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(g, g.data().iter().map(|&v| -v).collect()))],
        Op::Mul(a, b) => vec![
            (*a, zip_map(g, val(*b), |x, y| x * y)),
            (*b, zip_map(g, val(*a), |x, y| x * y)),
        ],
        Op::Scale(a, s) => vec![(*a, like(g, g.data().iter().map(|&v| v * *s).collect()))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = F::from_usize(val(*a).len()).unwrap();
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).unwrap())],
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = vec![];
            if wants(*a) {
                let mut ga = vec![F::zero(); m * k];
                F::gemm(m, n, k, F::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), F::zero(), &mut ga, (k as isize, 1));
                out.push((*a, like(av, ga)));
            }
            if wants(*b) {
                let mut gb = vec![F::zero(); k * n];
                F::gemm(k, m, n, F::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), F::zero(), &mut gb, (n as isize, 1));
                out.push((*b, like(bv, gb)));
            }
            out
        }
        Op::Linear { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (d_out, d_in) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.len() / d_in;
            let mut out = vec![];
            if wants(*x) {
                let mut gx = vec![F::zero(); rows * d_in];
                F::gemm(rows, d_out, d_in, F::one(), g.data(), (d_out as isize, 1), wv.data(), (d_in as isize, 1), F::zero(), &mut gx, (d_in as isize, 1));
                out.push((*x, like(xv, gx)));
            }
            if wants(*w) {
                let mut gw = vec![F::zero(); d_out * d_in];
                F::gemm(d_out, rows, d_in, F::one(), g.data(), (1, d_out as isize), xv.data(), (d_in as isize, 1), F::zero(), &mut gw, (d_in as isize, 1));
                out.push((*w, like(wv, gw)));
            }
            if wants(*b) {
                let mut gb = vec![F::zero(); d_out];
                for row in g.data().chunks(d_out) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((*b, like(val(*b), gb)));
            }
            out
        }
        Op::Conv1d { x, w, b, spec } => {
            let (xv, wv) = (val(*x), val(*w));
            let (batch, c_in, t_in) = bct("conv1d", xv.shape()).unwrap();
            let s = ConvShapes {
                batch,
                c_in,
                c_out: wv.shape()[0],
                kernel: wv.shape()[2],
                t_in,
                t_out: *g.shape().last().unwrap(),
            };
            let (gx, gw, gb) = conv::conv1d_backward(xv.data(), wv.data(), g.data(), &s, spec, wants(*x));
            let mut out = vec![(*w, like(wv, gw))];
            if let Some(gx) = gx {
                out.push((*x, like(xv, gx)));
            }
            if let Some(b) = b {
                out.push((*b, like(val(*b), gb)));
            }
            out
        }
        Op::ConvTranspose1d { x, w, b, stride } => {
            let (xv, wv) = (val(*x), val(*w));
            let (batch, c_in, t_in) = bct("conv_transpose1d", xv.shape()).unwrap();
            let s = ConvShapes {
                batch,
                c_in,
                c_out: wv.shape()[1],
                kernel: wv.shape()[2],
                t_in,
                t_out: t_in * stride,
            };
            let (gx, gw, gb) = conv::conv_transpose1d_backward(xv.data(), wv.data(), g.data(), &s, *stride, wants(*x));
            let mut out = vec![(*w, like(wv, gw))];
            if let Some(gx) = gx {
                out.push((*x, like(xv, gx)));
            }
            if let Some(b) = b {
                out.push((*b, like(val(*b), gb)));
            }
            out
        }
        Op::GroupNorm { x, gamma, beta, groups, cache } => {
            let xv = val(*x);
            let dims = bct("group_norm", xv.shape()).unwrap();
            let (gx, gg, gb) = norm::group_norm_backward(xv.data(), g.data(), dims, *groups, val(*gamma).data(), cache);
            vec![(*x, like(xv, gx)), (*gamma, like(val(*gamma), gg)), (*beta, like(val(*beta), gb))]
        }
        Op::BatchNorm { x, gamma, beta, mode, cache } => {
            let xv = val(*x);
            let dims = bct("batch_norm", xv.shape()).unwrap();
            let (gx, gg, gb) = norm::batch_norm_backward(xv.data(), g.data(), dims, val(*gamma).data(), cache, *mode);
            vec![(*x, like(xv, gx)), (*gamma, like(val(*gamma), gg)), (*beta, like(val(*beta), gb))]
        }
        Op::Elu(x) => {
            let y = &nodes[i].value;
            let data = g
                .data()
                .iter()
                .zip(val(*x).data())
                .zip(y.data())
                .map(|((&gv, &xv), &yv)| if xv > F::zero() { gv } else { gv * (yv + F::one()) })
                .collect();
            vec![(*x, like(g, data))]
        }
        Op::Softmax(x) => {
            let y = &nodes[i].value;
            let n = *y.shape().last().unwrap();
            let mut gx = vec![F::zero(); y.len()];
            for ((grow, yrow), out) in g.data().chunks(n).zip(y.data().chunks(n)).zip(gx.chunks_mut(n)) {
                let dot = grow.iter().zip(yrow).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                    *o = yv * (gv - dot);
                }
            }
            vec![(*x, like(y, gx))]
        }
        Op::L2Normalize { x, eps, norms } => {
            let y = &nodes[i].value;
            let xv = val(*x);
            let (outer, d, inner) = column_layout(y.shape());
            let (yd, gd) = (y.data(), g.data());
            let mut gx = vec![F::zero(); y.len()];
            for o in 0..outer {
                for c in 0..inner {
                    let base = o * d * inner + c;
                    let denom = norms[o * inner + c];
                    let raw_norm = {
                        let mut sq = F::zero();
                        for k in 0..d {
                            sq += xv.data()[base + k * inner] * xv.data()[base + k * inner];
                        }
                        sq.sqrt()
                    };
                    if raw_norm > *eps {
                        let mut dot = F::zero();
                        for k in 0..d {
                            dot += yd[base + k * inner] * gd[base + k * inner];
                        }
                        for k in 0..d {
                            let idx = base + k * inner;
                            gx[idx] = (gd[idx] - yd[idx] * dot) / denom;
                        }
                    } else {
                        for k in 0..d {
                            let idx = base + k * inner;
                            gx[idx] = gd[idx] / denom;
                        }
                    }
                }
            }
            vec![(*x, like(xv, gx))]
        }
        Op::MaxPoolTime { x, argmax } => {
            let xv = val(*x);
            let t = *xv.shape().last().unwrap();
            let mut gx = vec![F::zero(); xv.len()];
            for (row, (&am, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                gx[row * t + am] = gv;
            }
            vec![(*x, like(xv, gx))]
        }
        Op::Film { x, gamma, beta } => {
            let xv = val(*x);
            let (b, c, t) = bct("film", xv.shape()).unwrap();
            let (gv, bv) = (val(*gamma), val(*beta));
            let mut gx = vec![F::zero(); xv.len()];
            let mut gg = vec![F::zero(); gv.len()];
            let mut gb = vec![F::zero(); bv.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let gi = (bi * c + ci) % gv.len();
                    let bi_idx = (bi * c + ci) % bv.len();
                    let row = (bi * c + ci) * t;
                    let scale = gv.data()[gi];
                    let rows = row..row + t;
                    for ((out, &go), &x) in gx[rows.clone()].iter_mut().zip(&g.data()[rows.clone()]).zip(&xv.data()[rows]) {
                        *out = go * scale;
                        gg[gi] += go * x;
                        gb[bi_idx] += go;
                    }
                }
            }
            vec![(*x, like(xv, gx)), (*gamma, like(gv, gg)), (*beta, like(bv, gb))]
        }
        Op::FrameDot { frames, query } => {
            let (ev, qv) = (val(*frames), val(*query));
            let (b, d, t) = bct("frame_dot", ev.shape()).unwrap();
            let mut ge = vec![F::zero(); ev.len()];
            let mut gq = vec![F::zero(); qv.len()];
            for bi in 0..b {
                let grow = &g.data()[bi * t..(bi + 1) * t];
                for k in 0..d {
                    let idx = bi * d + k;
                    let row = &ev.data()[idx * t..(idx + 1) * t];
                    let q = qv.data()[idx];
                    for tt in 0..t {
                        ge[idx * t + tt] = grow[tt] * q;
                    }
                    gq[idx] = row.iter().zip(grow).fold(F::zero(), |acc, (&e, &gv)| acc + e * gv);
                }
            }
            vec![(*frames, like(ev, ge)), (*query, like(qv, gq))]
        }
        Op::FrameMix { frames, weights } => {
            let (ev, wv) = (val(*frames), val(*weights));
            let (b, d, t) = bct("frame_mix", ev.shape()).unwrap();
            let mut ge = vec![F::zero(); ev.len()];
            let mut gw = vec![F::zero(); wv.len()];
            for bi in 0..b {
                let wrow = &wv.data()[bi * t..(bi + 1) * t];
                for k in 0..d {
                    let idx = bi * d + k;
                    let gval = g.data()[idx];
                    let row = &ev.data()[idx * t..(idx + 1) * t];
                    for tt in 0..t {
                        ge[idx * t + tt] = gval * wrow[tt];
                        gw[bi * t + tt] += gval * row[tt];
                    }
                }
            }
            vec![(*frames, like(ev, ge)), (*weights, like(wv, gw))]
        }
        Op::Narrow { x, start } => {
            let xv = val(*x);
            let n = *xv.shape().last().unwrap();
            let len = *g.shape().last().unwrap();
            let mut gx = vec![F::zero(); xv.len()];
            for (dst, src) in gx.chunks_mut(n).zip(g.data().chunks(len)) {
                dst[*start..*start + len].copy_from_slice(src);
            }
            vec![(*x, like(xv, gx))]
        }
        Op::Custom { inputs, rule } => {
            let values: Vec<&Tensor<F>> = inputs.iter().map(|&k| val(k)).collect();
            rule.backward(&values, &nodes[i].value, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(pg, &k)| pg.map(|pg| (k, pg)))
                .collect()
        }
    }
}
