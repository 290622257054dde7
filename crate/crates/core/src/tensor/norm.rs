//! Group and batch normalization kernels over `[B, C, T]` activations.

use super::kernels::{dot_centered, sum, sum_sq_dev};
use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer. Eval mode uses mean 0 and
/// variance 1 until the first training-mode update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    /// False until the first training-mode update.
    pub initialized: bool,
}

impl<F: Element> BatchNormStats<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
            initialized: false,
        }
    }
}

/// Saved statistics for the normalization backward pass: one
/// `(mean, inverse std)` pair per normalized set.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<F> {
    pub mean: Vec<F>,
    pub rstd: Vec<F>,
}

pub(crate) fn group_norm_forward<F: Element>(
    x: &[F],
    (batch, channels, time): (usize, usize, usize),
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
) -> (Vec<F>, NormCache<F>) {
    super::kernels::vectorized(|| {
        let cpg = channels / groups;
        let n = F::from_usize(cpg * time).unwrap();
        let mut out = vec![F::zero(); x.len()];
        let mut cache = NormCache {
            mean: Vec::with_capacity(batch * groups),
            rstd: Vec::with_capacity(batch * groups),
        };
        for b in 0..batch {
            for g in 0..groups {
                let start = (b * channels + g * cpg) * time;
                let seg = &x[start..start + cpg * time];
                let mean = sum(seg) / n;
                let var = sum_sq_dev(seg, mean) / n;
                let rstd = (var + eps).sqrt().recip();
                cache.mean.push(mean);
                cache.rstd.push(rstd);
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let row = start + ci * time;
                    let (scale, shift) = (gamma[c] * rstd, beta[c]);
                    for (o, &v) in out[row..row + time].iter_mut().zip(&x[row..row + time]) {
                        *o = (v - mean) * scale + shift;
                    }
                }
            }
        }
        (out, cache)
    })
}

/// Returns `(gx, ggamma, gbeta)`.
pub(crate) fn group_norm_backward<F: Element>(
    x: &[F],
    gout: &[F],
    (batch, channels, time): (usize, usize, usize),
    groups: usize,
    gamma: &[F],
    cache: &NormCache<F>,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    super::kernels::vectorized(|| {
        let cpg = channels / groups;
        let n = F::from_usize(cpg * time).unwrap();
        let mut gx = vec![F::zero(); x.len()];
        let mut ggamma = vec![F::zero(); channels];
        let mut gbeta = vec![F::zero(); channels];
        for b in 0..batch {
            for g in 0..groups {
                let idx = b * groups + g;
                let (mean, rstd) = (cache.mean[idx], cache.rstd[idx]);
                let start = (b * channels + g * cpg) * time;
                // sums of dxhat and dxhat * xhat over the group
                let mut sum_d = F::zero();
                let mut sum_dx = F::zero();
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let row = start + ci * time;
                    let go = &gout[row..row + time];
                    let s_go = sum(go);
                    let s_goxhat = dot_centered(go, &x[row..row + time], mean) * rstd;
                    ggamma[c] += s_goxhat;
                    gbeta[c] += s_go;
                    sum_d += gamma[c] * s_go;
                    sum_dx += gamma[c] * s_goxhat;
                }
                let mean_d = sum_d / n;
                let mean_dx = sum_dx / n;
                for ci in 0..cpg {
                    let c = g * cpg + ci;
                    let row = start + ci * time;
                    let (gc, k) = (gamma[c] * rstd, rstd * rstd * mean_dx);
                    let offset = rstd * mean_d;
                    for ((o, &go), &v) in gx[row..row + time].iter_mut().zip(&gout[row..row + time]).zip(&x[row..row + time]) {
                        *o = go * gc - offset - (v - mean) * k;
                    }
                }
            }
        }
        (gx, ggamma, gbeta)
    })
}

/// Per-channel statistics over `(batch, time)`: returns `(mean, biased var)`.
pub(crate) fn batch_moments<F: Element>(
    x: &[F],
    (batch, channels, time): (usize, usize, usize),
) -> (Vec<F>, Vec<F>) {
    super::kernels::vectorized(|| {
        let n = F::from_usize(batch * time).unwrap();
        let mut mean = vec![F::zero(); channels];
        let mut var = vec![F::zero(); channels];
        for c in 0..channels {
            let mut s = F::zero();
            for b in 0..batch {
                let row = (b * channels + c) * time;
                s += sum(&x[row..row + time]);
            }
            let m = s / n;
            let mut v = F::zero();
            for b in 0..batch {
                let row = (b * channels + c) * time;
                v += sum_sq_dev(&x[row..row + time], m);
            }
            mean[c] = m;
            var[c] = v / n;
        }
        (mean, var)
    })
}

pub(crate) fn channel_normalize<F: Element>(
    x: &[F],
    (batch, channels, time): (usize, usize, usize),
    mean: &[F],
    rstd: &[F],
    gamma: &[F],
    beta: &[F],
) -> Vec<F> {
    super::kernels::vectorized(|| {
        let mut out = vec![F::zero(); x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let row = (b * channels + c) * time;
                let (m, scale, shift) = (mean[c], gamma[c] * rstd[c], beta[c]);
                for (o, &v) in out[row..row + time].iter_mut().zip(&x[row..row + time]) {
                    *o = (v - m) * scale + shift;
                }
            }
        }
        out
    })
}

/// Batch-norm backward. In eval mode the statistics are constants.
pub(crate) fn batch_norm_backward<F: Element>(
    x: &[F],
    gout: &[F],
    (batch, channels, time): (usize, usize, usize),
    gamma: &[F],
    cache: &NormCache<F>,
    mode: NormMode,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    super::kernels::vectorized(|| {
        let n = F::from_usize(batch * time).unwrap();
        let mut gx = vec![F::zero(); x.len()];
        let mut ggamma = vec![F::zero(); channels];
        let mut gbeta = vec![F::zero(); channels];
        for c in 0..channels {
            let (mean, rstd) = (cache.mean[c], cache.rstd[c]);
            let mut sum_d = F::zero();
            let mut sum_dx = F::zero();
            for b in 0..batch {
                let row = (b * channels + c) * time;
                let go = &gout[row..row + time];
                let s_go = sum(go);
                let s_goxhat = dot_centered(go, &x[row..row + time], mean) * rstd;
                ggamma[c] += s_goxhat;
                gbeta[c] += s_go;
                sum_d += gamma[c] * s_go;
                sum_dx += gamma[c] * s_goxhat;
            }
            let (mean_d, mean_dx) = match mode {
                NormMode::Train => (sum_d / n, sum_dx / n),
                NormMode::Eval => (F::zero(), F::zero()),
            };
            for b in 0..batch {
                let row = (b * channels + c) * time;
                let (gc, k) = (gamma[c] * rstd, rstd * rstd * mean_dx);
                let offset = rstd * mean_d;
                for ((o, &go), &v) in gx[row..row + time].iter_mut().zip(&gout[row..row + time]).zip(&x[row..row + time]) {
                    *o = go * gc - offset - (v - mean) * k;
                }
            }
        }
        (gx, ggamma, gbeta)
    })
}
