//! Scale-invariant SDR: the evaluation metric, the soft-clipped training
//! loss and the improvement over the unprocessed mixture.

use thiserror::Error;

use crate::tensor::{CustomBackward, Element, Tape, Tensor, TensorError, Var};

/// Ceiling of the training objective in dB.
pub const LOSS_CEILING_DB: f64 = 30.0;

/// Soft-clip constant `tau = 10^(-30 / 10)`.
pub fn soft_clip_tau() -> f64 {
    10f64.powf(-LOSS_CEILING_DB / 10.0)
}

/// Bound applied to per-example SI-SDRi when aggregating reports.
pub const REPORT_CAP_DB: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("target has zero energy")]
    ZeroTarget,
    #[error("length mismatch: estimate {0} vs target {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiSdrResult {
    pub value_db: f64,
    /// Optimal target scale `<estimate, target> / ||target||^2`.
    pub alpha: f64,
    /// True for the soft-clipped (loss) variant.
    pub clipped: bool,
}

struct Projection {
    alpha: f64,
    signal: f64,
    error: f64,
}

fn project<T: Copy + Into<f64>>(estimate: &[T], target: &[T]) -> Result<Projection> {
    if estimate.len() != target.len() {
        return Err(ObjectiveError::LengthMismatch(estimate.len(), target.len()));
    }
    let (mut dot, mut tt) = (0.0f64, 0.0f64);
    for (&e, &t) in estimate.iter().zip(target) {
        let (e, t) = (e.into(), t.into());
        dot += e * t;
        tt += t * t;
    }
    if tt == 0.0 {
        return Err(ObjectiveError::ZeroTarget);
    }
    let alpha = dot / tt;
    let error = estimate
        .iter()
        .zip(target)
        .map(|(&e, &t)| {
            let r = alpha * t.into() - e.into();
            r * r
        })
        .sum();
    Ok(Projection {
        alpha,
        signal: alpha * alpha * tt,
        error,
    })
}

/// `10 log10(||a s||^2 / ||a s - estimate||^2)`; `+inf` for a perfect
/// estimate.
pub fn si_sdr<T: Copy + Into<f64>>(estimate: &[T], target: &[T]) -> Result<SiSdrResult> {
    let p = project(estimate, target)?;
    let value_db = if p.error == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (p.signal / p.error).log10()
    };
    Ok(SiSdrResult {
        value_db,
        alpha: p.alpha,
        clipped: false,
    })
}

/// Soft-clipped variant `-10 log10(E / P + tau)`, bounded above by 30 dB.
pub fn si_sdr_clipped<T: Copy + Into<f64>>(estimate: &[T], target: &[T]) -> Result<SiSdrResult> {
    let p = project(estimate, target)?;
    let value_db = if p.signal == 0.0 {
        // estimate orthogonal to the target
        f64::NEG_INFINITY
    } else {
        -10.0 * (p.error / p.signal + soft_clip_tau()).log10()
    };
    Ok(SiSdrResult {
        value_db,
        alpha: p.alpha,
        clipped: true,
    })
}

/// `si_sdr(estimate) - si_sdr(mixture)`, unclipped.
pub fn si_sdr_improvement<T: Copy + Into<f64>>(estimate: &[T], mixture: &[T], target: &[T]) -> Result<f64> {
    let out = si_sdr(estimate, target)?.value_db;
    let base = si_sdr(mixture, target)?.value_db;
    if out == base {
        // covers inf - inf
        return Ok(0.0);
    }
    Ok(out - base)
}

pub fn cap_report(value_db: f64) -> f64 {
    value_db.clamp(-REPORT_CAP_DB, REPORT_CAP_DB)
}

/// Per-example loss value and its gradient w.r.t. the estimate.
fn loss_and_grad(estimate: &[f64], target: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let p = project(estimate, target)?;
    if p.signal == 0.0 {
        return Err(ObjectiveError::Tensor(TensorError::NonFinite(
            "si_sdr_loss: estimate orthogonal to target".into(),
        )));
    }
    let ratio = p.error / p.signal;
    let loss = 10.0 * (ratio + tau).log10();
    // d/d estimate of 10 log10(E/P + tau), with e = alpha s - estimate:
    // (10 / ln 10) / (E/P + tau) * (2 / P) * (-e - (E/P) alpha s)
    let scale = 10.0 / std::f64::consts::LN_10 / (ratio + tau) * 2.0 / p.signal;
    let grad = estimate
        .iter()
        .zip(target)
        .map(|(&e, &t)| {
            let proj = p.alpha * t;
            let resid = proj - e;
            scale * (-resid - ratio * proj)
        })
        .collect();
    Ok((loss, grad))
}

/// Splits `[B, 1, T]`, `[B, T]` or `[T]` into `(batch, T)`.
fn batch_layout(shape: &[usize]) -> (usize, usize) {
    let t = *shape.last().unwrap();
    let total: usize = shape.iter().product();
    (total / t, t)
}

struct SiSdrLossBackward {
    grads: Vec<f64>,
}

impl<F: Element> CustomBackward<F> for SiSdrLossBackward {
    fn backward(&self, inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let g = grad.item().to_f64_lossy();
        let data = self.grads.iter().map(|&v| F::from_f64_lossy(v * g)).collect();
        vec![Some(Tensor::new(inputs[0].shape(), data).expect("estimate shape")), None]
    }
}

/// Mean over the batch of `10 log10(E / P + tau)`, i.e. the negated
/// soft-clipped SI-SDR. Gradients flow to `estimate` only; `target` is data.
///
/// The loss of a perfect estimate is `10 log10(tau)` (-30 dB for the default).
pub fn si_sdr_loss<F: Element>(tape: &Tape<F>, estimate: Var, target: Var, tau: f64) -> Result<Var> {
    let (value, grads) = {
        let (est, tgt) = (tape.value(estimate), tape.value(target));
        if est.shape() != tgt.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "si_sdr_loss",
                lhs: est.shape().to_vec(),
                rhs: tgt.shape().to_vec(),
            }
            .into());
        }
        let (batch, t) = batch_layout(est.shape());
        let (e64, t64) = (est.to_f64_vec(), tgt.to_f64_vec());
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(e64.len());
        for (e, s) in e64.chunks(t).zip(t64.chunks(t)) {
            let (loss, g) = loss_and_grad(e, s, tau)?;
            total += loss;
            grads.extend(g.into_iter().map(|v| v / batch as f64));
        }
        (total / batch as f64, grads)
    };
    Ok(tape.custom(
        &[estimate, target],
        Tensor::scalar(F::from_f64_lossy(value)),
        Box::new(SiSdrLossBackward { grads }),
    ))
}
