//! 1-D convolution kernels (cross-correlation) via im2col + gemm.
//!
//! Layouts: input `[B, C_in, T]`, conv weight `[C_out, C_in, k]`,
//! transposed-conv weight `[C_in, C_out, k]`.

use super::{Element, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPadding {
    /// Centered zero padding, left pad `floor((k - 1) * dilation / 2)`,
    /// output length `ceil(T / stride)`.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: ConvPadding,
}

impl ConvSpec {
    pub fn same(stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: ConvPadding::Same,
        }
    }

    pub fn valid(stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            dilation,
            padding: ConvPadding::Valid,
        }
    }

    pub(crate) fn left_pad(&self, kernel: usize) -> usize {
        match self.padding {
            ConvPadding::Same => (kernel - 1) * self.dilation / 2,
            ConvPadding::Valid => 0,
        }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self::same(1, 1)
    }
}

pub fn conv1d_output_len(len: usize, kernel: usize, spec: &ConvSpec) -> Result<usize> {
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv1d",
            reason: "stride and dilation must be positive".into(),
        });
    }
    match spec.padding {
        ConvPadding::Same => Ok(len.div_ceil(spec.stride)),
        ConvPadding::Valid => {
            let effective = (kernel - 1) * spec.dilation + 1;
            if len < effective {
                return Err(TensorError::InvalidArgument {
                    op: "conv1d",
                    reason: format!("input length {len} shorter than effective kernel {effective}"),
                });
            }
            Ok((len - effective) / spec.stride + 1)
        }
    }
}

/// Geometry shared by im2col / col2im.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad: usize,
    /// Length of the signal being windowed.
    pub signal_len: usize,
    /// Number of window positions.
    pub positions: usize,
}

impl Window {
    /// Window positions `t` whose tap `j` lands inside the signal, and the
    /// source index of the first of them.
    #[inline]
    fn valid(&self, j: usize) -> (usize, usize, usize) {
        let off = (j * self.dilation) as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let end = self.signal_len as isize - off;
        let hi = if end <= 0 { 0 } else { (((end + s - 1) / s) as usize).min(self.positions) };
        let lo = lo.min(hi);
        (lo, hi, (lo as isize * s + off).max(0) as usize)
    }

    /// `cols[(c * k + j), t] = signal[c, t * stride + j * dilation - pad]`.
    pub fn im2col<F: Element>(&self, signal: &[F], cols: &mut [F]) {
        let n = self.positions;
        for c in 0..self.channels {
            let row_sig = &signal[c * self.signal_len..(c + 1) * self.signal_len];
            for j in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                let (lo, hi, src) = self.valid(j);
                row[..lo].fill(F::zero());
                row[hi..].fill(F::zero());
                if lo == hi {
                    continue;
                }
                if self.stride == 1 {
                    row[lo..hi].copy_from_slice(&row_sig[src..src + hi - lo]);
                } else {
                    for (out, &v) in row[lo..hi].iter_mut().zip(row_sig[src..].iter().step_by(self.stride)) {
                        *out = v;
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds columns back into the signal.
    pub fn col2im<F: Element>(&self, cols: &[F], signal: &mut [F]) {
        let n = self.positions;
        for c in 0..self.channels {
            let row_sig = &mut signal[c * self.signal_len..(c + 1) * self.signal_len];
            for j in 0..self.kernel {
                let row = &cols[(c * self.kernel + j) * n..(c * self.kernel + j + 1) * n];
                let (lo, hi, src) = self.valid(j);
                if lo == hi {
                    continue;
                }
                if self.stride == 1 {
                    for (out, &v) in row_sig[src..src + hi - lo].iter_mut().zip(&row[lo..hi]) {
                        *out += v;
                    }
                } else {
                    for (out, &v) in row_sig[src..].iter_mut().step_by(self.stride).zip(&row[lo..hi]) {
                        *out += v;
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub t_in: usize,
    pub t_out: usize,
}

/// Forward strided conv: `out[b] = W * im2col(x[b]) + bias`.
pub(crate) fn conv1d_forward<F: Element>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    s: &ConvShapes,
    spec: &ConvSpec,
) -> Vec<F> {
    super::kernels::vectorized(|| {
        let win = window(s.c_in, s.kernel, s.t_in, s.t_out, spec);
        let rows = s.c_in * s.kernel;
        let mut cols = vec![F::zero(); rows * s.t_out];
        let mut out = vec![F::zero(); s.batch * s.c_out * s.t_out];
        for b in 0..s.batch {
            win.im2col(&x[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in], &mut cols);
            let ob = &mut out[b * s.c_out * s.t_out..(b + 1) * s.c_out * s.t_out];
            if let Some(bias) = bias {
                for (row, &bv) in ob.chunks_mut(s.t_out).zip(bias) {
                    row.fill(bv);
                }
            }
            let beta = if bias.is_some() { F::one() } else { F::zero() };
            F::gemm(
                s.c_out,
                rows,
                s.t_out,
                F::one(),
                w,
                (rows as isize, 1),
                &cols,
                (s.t_out as isize, 1),
                beta,
                ob,
                (s.t_out as isize, 1),
            );
        }
        out
    })
}

/// Gradients of [`conv1d_forward`] w.r.t. input, weight and bias.
pub(crate) fn conv1d_backward<F: Element>(
    x: &[F],
    w: &[F],
    gout: &[F],
    s: &ConvShapes,
    spec: &ConvSpec,
    need_x: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    super::kernels::vectorized(|| {
        let win = window(s.c_in, s.kernel, s.t_in, s.t_out, spec);
        let rows = s.c_in * s.kernel;
        let mut cols = vec![F::zero(); rows * s.t_out];
        let mut gw = vec![F::zero(); s.c_out * rows];
        let mut gb = vec![F::zero(); s.c_out];
        let mut gx = need_x.then(|| vec![F::zero(); s.batch * s.c_in * s.t_in]);
        for b in 0..s.batch {
            let go = &gout[b * s.c_out * s.t_out..(b + 1) * s.c_out * s.t_out];
            for (acc, row) in gb.iter_mut().zip(go.chunks(s.t_out)) {
                *acc += row.iter().copied().sum::<F>();
            }
            win.im2col(&x[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in], &mut cols);
            // gW += gout * cols^T
            F::gemm(
                s.c_out,
                s.t_out,
                rows,
                F::one(),
                go,
                (s.t_out as isize, 1),
                &cols,
                (1, s.t_out as isize),
                F::one(),
                &mut gw,
                (rows as isize, 1),
            );
            if let Some(gx) = gx.as_mut() {
                // gcols = W^T * gout, then scatter back
                F::gemm(
                    rows,
                    s.c_out,
                    s.t_out,
                    F::one(),
                    w,
                    (1, rows as isize),
                    go,
                    (s.t_out as isize, 1),
                    F::zero(),
                    &mut cols,
                    (s.t_out as isize, 1),
                );
                win.col2im(&cols, &mut gx[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in]);
            }
        }
        (gx, gw, gb)
    })
}

/// Transposed conv, the exact adjoint of a same-padded strided conv:
/// input `[B, C_in, T]` maps to `[B, C_out, T * stride]`.
pub(crate) fn conv_transpose1d_forward<F: Element>(
    x: &[F],
    w: &[F],
    bias: Option<&[F]>,
    s: &ConvShapes,
    stride: usize,
) -> Vec<F> {
    super::kernels::vectorized(|| {
        let spec = ConvSpec::same(stride, 1);
        // window over the (long) output signal with t_in positions
        let win = window(s.c_out, s.kernel, s.t_out, s.t_in, &spec);
        let rows = s.c_out * s.kernel;
        let mut cols = vec![F::zero(); rows * s.t_in];
        let mut out = vec![F::zero(); s.batch * s.c_out * s.t_out];
        for b in 0..s.batch {
            let xb = &x[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in];
            // cols = W'^T * x with W' viewed as [C_in, C_out * k]
            F::gemm(
                rows,
                s.c_in,
                s.t_in,
                F::one(),
                w,
                (1, rows as isize),
                xb,
                (s.t_in as isize, 1),
                F::zero(),
                &mut cols,
                (s.t_in as isize, 1),
            );
            let ob = &mut out[b * s.c_out * s.t_out..(b + 1) * s.c_out * s.t_out];
            if let Some(bias) = bias {
                for (row, &bv) in ob.chunks_mut(s.t_out).zip(bias) {
                    row.fill(bv);
                }
            }
            win.col2im(&cols, ob);
        }
        out
    })
}

pub(crate) fn conv_transpose1d_backward<F: Element>(
    x: &[F],
    w: &[F],
    gout: &[F],
    s: &ConvShapes,
    stride: usize,
    need_x: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    super::kernels::vectorized(|| {
        let spec = ConvSpec::same(stride, 1);
        let win = window(s.c_out, s.kernel, s.t_out, s.t_in, &spec);
        let rows = s.c_out * s.kernel;
        let mut gcols = vec![F::zero(); rows * s.t_in];
        let mut gw = vec![F::zero(); s.c_in * rows];
        let mut gb = vec![F::zero(); s.c_out];
        let mut gx = need_x.then(|| vec![F::zero(); s.batch * s.c_in * s.t_in]);
        for b in 0..s.batch {
            let go = &gout[b * s.c_out * s.t_out..(b + 1) * s.c_out * s.t_out];
            for (acc, row) in gb.iter_mut().zip(go.chunks(s.t_out)) {
                *acc += row.iter().copied().sum::<F>();
            }
            win.im2col(go, &mut gcols);
            let xb = &x[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in];
            // gW' += x * gcols^T
            F::gemm(
                s.c_in,
                s.t_in,
                rows,
                F::one(),
                xb,
                (s.t_in as isize, 1),
                &gcols,
                (1, s.t_in as isize),
                F::one(),
                &mut gw,
                (rows as isize, 1),
            );
            if let Some(gx) = gx.as_mut() {
                F::gemm(
                    s.c_in,
                    rows,
                    s.t_in,
                    F::one(),
                    w,
                    (rows as isize, 1),
                    &gcols,
                    (s.t_in as isize, 1),
                    F::zero(),
                    &mut gx[b * s.c_in * s.t_in..(b + 1) * s.c_in * s.t_in],
                    (s.t_in as isize, 1),
                );
            }
        }
        (gx, gw, gb)
    })
}

fn window(channels: usize, kernel: usize, signal_len: usize, positions: usize, spec: &ConvSpec) -> Window {
    Window {
        channels,
        kernel,
        dilation: spec.dilation,
        stride: spec.stride,
        pad: spec.left_pad(kernel),
        signal_len,
        positions,
    }
}
