//! Branch-free `expm1` for the f32 ELU hot path.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_145_75;
const LN2_LO: f32 = 1.428_606_8e-6;
/// Adding and subtracting `1.5 * 2^23` rounds to the nearest integer.
const ROUNDER: f32 = 12_582_912.0;

/// `exp(x) - 1` for `x <= 0`, within a few ulp of `f32::exp_m1`.
///
/// `x = n ln2 + r` with `|r| <= ln2 / 2`; `q = expm1(r)` by its Taylor
/// series, then `expm1(x) = 2^n q + (2^n - 1)`, which is exactly `q` for
/// `n = 0`, so small arguments keep full relative precision.
#[inline(always)]
fn expm1_nonpositive(x: f32) -> f32 {
    let x = x.max(-87.0);
    let shifted = x * LOG2E + ROUNDER;
    let n = shifted - ROUNDER;
    // The low mantissa bits of `shifted` hold `n` exactly.
    let ni = shifted.to_bits() as i32 - ROUNDER.to_bits() as i32;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let q = r
        + r * r
            * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0))))));
    let scale = f32::from_bits(((ni + 127) as u32) << 23);
    scale * q + (scale - 1.0)
}

#[inline(always)]
fn elu_into(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        let neg = expm1_nonpositive(v.min(0.0));
        *o = if v > 0.0 { v } else { neg };
    }
}

/// ELU with `alpha = 1` over a slice.
pub(crate) fn elu_f32(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    super::kernels::vectorized(|| elu_into(x, &mut out));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_std_expm1() {
        let mut worst = 0.0f64;
        let mut x = -90.0f32;
        while x <= 0.0 {
            let fast = f64::from(expm1_nonpositive(x));
            let exact = f64::from(x).exp_m1();
            let err = (fast - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
            worst = worst.max(if x == 0.0 { fast.abs() } else { err });
            x += 0.000_731;
        }
        assert!(worst < 4.0 * f64::from(f32::EPSILON), "{worst}");
        assert_eq!(expm1_nonpositive(0.0), 0.0);
        assert_eq!(expm1_nonpositive(-1e-30), -1e-30);
        assert_eq!(expm1_nonpositive(-200.0), -1.0);
    }

    #[test]
    fn elu_values() {
        let y = elu_f32(&[2.0, 0.0, -1.0, -50.0]);
        assert_eq!(y[0], 2.0);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - (-1f32).exp_m1()).abs() < 1e-7);
        assert!((y[3] + 1.0).abs() < 1e-7);
    }
}
