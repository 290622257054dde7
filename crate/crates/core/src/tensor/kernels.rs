//! Reductions with eight independent accumulators, so the compiler can keep
//! them in vector registers. The summation order is fixed, hence results are
//! deterministic.

use super::Element;

const LANES: usize = 8;

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn call_avx2<R>(f: impl FnOnce() -> R) -> R {
    f()
}

/// Runs `f` with AVX2 code generation when the CPU supports it. The kernels
/// never fuse multiply-adds, so results do not depend on the path taken.
#[inline(always)]
pub(crate) fn vectorized<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { call_avx2(f) };
    }
    f()
}

#[inline]
fn fold<F: Element>(acc: [F; LANES]) -> F {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

pub(crate) fn sum<F: Element>(x: &[F]) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    rest.iter().fold(fold(acc), |s, &v| s + v)
}

/// `sum (x - m)^2`.
pub(crate) fn sum_sq_dev<F: Element>(x: &[F], m: F) -> F {
    let mut acc = [F::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let rest = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let d = c[l] - m;
            acc[l] += d * d;
        }
    }
    rest.iter().fold(fold(acc), |s, &v| s + (v - m) * (v - m))
}

/// `sum a * (b - m)`.
pub(crate) fn dot_centered<F: Element>(a: &[F], b: &[F], m: F) -> F {
    assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * (y[l] - m);
        }
    }
    ra.iter().zip(rb).fold(fold(acc), |s, (&x, &y)| s + x * (y - m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_match_naive() {
        for n in [0usize, 1, 7, 8, 9, 31, 100] {
            let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
            let naive_sum: f64 = a.iter().sum();
            assert!((sum(&a) - naive_sum).abs() < 1e-12);
            let naive_sq: f64 = a.iter().map(|v| (v - 0.2) * (v - 0.2)).sum();
            assert!((sum_sq_dev(&a, 0.2) - naive_sq).abs() < 1e-12);
            let naive_dot: f64 = a.iter().zip(&b).map(|(x, y)| x * (y - 0.1)).sum();
            assert!((dot_centered(&a, &b, 0.1) - naive_dot).abs() < 1e-12);
        }
    }
}
