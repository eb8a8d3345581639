//! Power-of-two quantization and requantization.
//!
//! Real values are represented as `q * 2^-n` with `q` an `i8` and `n` a
//! per-tensor integer exponent. Kernels accumulate in `i32` and reduce to
//! `i8` with [`requantize`]: multiply by a 16-bit factor, add a rounding
//! constant, arithmetic shift right, clamp to `[-128, 127]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RequantParams;

pub const I8_MIN: i64 = -(1 << (RequantParams::BITS - 1));
pub const I8_MAX: i64 = (1 << (RequantParams::BITS - 1)) - 1;

/// Rounding arithmetic shift: `(v + 2^(shift-1)) >> shift`, round-half-up.
#[inline]
pub fn round_shift(v: i64, shift: u32) -> i64 {
    if shift == 0 {
        v
    } else {
        (v + (1i64 << (shift - 1))) >> shift
    }
}

/// Reduce an `i32` accumulator (bias already added) to `i8`.
#[inline]
pub fn requantize(acc: i32, rp: &RequantParams) -> i8 {
    let scaled = round_shift(i64::from(acc) * i64::from(rp.eps_mul), rp.eps_div);
    scaled.clamp(I8_MIN, I8_MAX) as i8
}

/// Round-to-nearest-even of `x * 2^scale_exp`, saturated to `i8`.
pub fn quantize_float(x: f64, scale_exp: i32) -> Result<i8> {
    if !x.is_finite() {
        return Err(Error::InvalidValue(format!("cannot quantize non-finite value {x}")));
    }
    let v = (x * (2f64).powi(scale_exp)).round_ties_even();
    Ok(v.clamp(I8_MIN as f64, I8_MAX as f64) as i8)
}

pub fn quantize_slice(xs: &[f64], scale_exp: i32) -> Result<Vec<i8>> {
    xs.iter().map(|&x| quantize_float(x, scale_exp)).collect()
}

pub fn dequantize(q: i8, scale_exp: i32) -> f64 {
    f64::from(q) * (2f64).powi(-scale_exp)
}

/// Observed range of a float tensor and the exponent chosen for it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub max_abs: f64,
    pub chosen_exp: i32,
}

/// Exponent used for an all-zero tensor.
pub const DEFAULT_EXP: i32 = 7;

/// Pick the largest `n` with `127 * 2^-n >= max|x|`.
pub fn calibrate(xs: &[f64]) -> Result<CalibrationStats> {
    if xs.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let mut max_abs = 0f64;
    for &x in xs {
        if !x.is_finite() {
            return Err(Error::InvalidValue(format!("non-finite calibration value {x}")));
        }
        max_abs = max_abs.max(x.abs());
    }
    if max_abs == 0.0 {
        return Ok(CalibrationStats {
            max_abs,
            chosen_exp: DEFAULT_EXP,
        });
    }
    let fits = |n: i32| I8_MAX as f64 * (2f64).powi(-n) >= max_abs;
    let mut n = (I8_MAX as f64 / max_abs).log2().floor() as i32;
    while !fits(n) {
        n -= 1;
    }
    while fits(n + 1) {
        n += 1;
    }
    Ok(CalibrationStats {
        max_abs,
        chosen_exp: n,
    })
}

/// Requantization from an accumulator at scale `2^-(in_exp + w_exp)` to an
/// output at scale `2^-out_exp`.
pub fn derive_requant(in_exp: i32, w_exp: i32, out_exp: i32) -> Result<RequantParams> {
    let shift = in_exp + w_exp - out_exp;
    if shift >= 0 {
        if shift >= 32 {
            return Err(Error::ShiftOverflow { shift });
        }
        RequantParams::new(1, shift as u32)
    } else {
        let up = -shift;
        if up >= 16 {
            return Err(Error::ScaleOverflow { shift: up });
        }
        RequantParams::new(1u16 << up, 0)
    }
}

/// Approximate a positive real factor as `eps_mul * 2^-eps_div` with
/// `eps_mul` using as many of its 16 bits as possible.
pub fn fixed_multiplier(factor: f64) -> Result<RequantParams> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidValue(format!("multiplier {factor} must be positive")));
    }
    let mut div: i32 = 15 - factor.log2().floor() as i32;
    loop {
        if div < 0 {
            return Err(Error::ScaleOverflow { shift: -div });
        }
        if div >= 32 {
            return Err(Error::ShiftOverflow { shift: div });
        }
        let mul = (factor * (2f64).powi(div)).round();
        if mul > f64::from(u16::MAX) {
            div -= 1;
            continue;
        }
        if mul < 1.0 {
            div += 1;
            continue;
        }
        return RequantParams::new(mul as u16, div as u32);
    }
}

/// Power-of-two stand-in for the `1/sqrt(d)` attention temperature:
/// `round(log2(sqrt(P)))`, so `P = 32` gives a shift of 3 (`/8`).
pub fn sqrt_shift(proj_dim: usize) -> u32 {
    ((proj_dim.max(1) as f64).log2() / 2.0).round() as u32
}

/// Rescaling of raw attention logits before the integer softmax.
///
/// The logits stay in 32 bits (no int8 clamp). After the shift their real
/// value is `logit * 2^-logit_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub eps_mul: u16,
    pub eps_div: u32,
    pub logit_exp: i32,
}

impl ScoreScale {
    /// Scores of `lhs * rhs^T` with operands at `2^-lhs_exp`, `2^-rhs_exp`,
    /// divided by the power-of-two approximation of `sqrt(proj_dim)`.
    pub fn for_attention(lhs_exp: i32, rhs_exp: i32, proj_dim: usize) -> Self {
        ScoreScale {
            eps_mul: 1,
            eps_div: sqrt_shift(proj_dim),
            logit_exp: lhs_exp + rhs_exp,
        }
    }

    #[inline]
    pub fn apply(&self, acc: i64) -> i32 {
        round_shift(acc * i64::from(self.eps_mul), self.eps_div)
            .clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rp(mul: u16, div: u32) -> RequantParams {
        RequantParams::new(mul, div).unwrap()
    }

    #[test]
    fn requantize_examples() {
        // (100*3 + 1) >> 1 = 150, clamped
        assert_eq!(requantize(100, &rp(3, 1)), 127);
        assert_eq!(requantize(0, &rp(123, 9)), 0);
        assert_eq!(requantize(-1_000_000, &rp(1, 0)), -128);
        assert_eq!(requantize(5, &rp(1, 1)), 3);
        assert_eq!(requantize(-5, &rp(1, 1)), -2);
    }

    #[test]
    fn requantize_uses_wide_intermediate() {
        assert_eq!(requantize(i32::MAX, &rp(u16::MAX, 31)), 127);
        assert_eq!(requantize(i32::MIN, &rp(u16::MAX, 31)), -128);
        // 2^20 * 2^15 = 2^35 would overflow i32
        assert_eq!(requantize(1 << 20, &rp(1 << 15, 30)), 32);
    }

    #[test]
    fn quantize_float_examples() {
        assert_eq!(quantize_float(0.5, 7).unwrap(), 64);
        assert_eq!(quantize_float(1.0, 7).unwrap(), 127);
        assert_eq!(quantize_float(-1.0, 7).unwrap(), -128);
        assert_eq!(quantize_float(2.5 / 128.0, 7).unwrap(), 2);
        assert_eq!(quantize_float(3.5 / 128.0, 7).unwrap(), 4);
        assert!(quantize_float(f64::NAN, 7).is_err());
        assert!(quantize_float(f64::INFINITY, 0).is_err());
    }

    #[test]
    fn calibrate_examples() {
        assert_eq!(calibrate(&[0.1, -0.9]).unwrap().chosen_exp, 7);
        assert_eq!(calibrate(&[3.2]).unwrap().chosen_exp, 5);
        assert_eq!(calibrate(&[0.0; 4]).unwrap().chosen_exp, 7);
        assert!(matches!(calibrate(&[]), Err(Error::EmptyTensor)));
        // boundary: exactly representable
        assert_eq!(calibrate(&[127.0 / 64.0]).unwrap().chosen_exp, 6);
    }

    #[test]
    fn derive_requant_examples() {
        let r = derive_requant(7, 7, 7).unwrap();
        assert_eq!((r.eps_mul, r.eps_div), (1, 7));
        let r = derive_requant(7, 7, 14).unwrap();
        assert_eq!((r.eps_mul, r.eps_div), (1, 0));
        let r = derive_requant(3, 2, 8).unwrap();
        assert_eq!((r.eps_mul, r.eps_div), (8, 0));
        assert!(matches!(derive_requant(0, 0, 20), Err(Error::ScaleOverflow { .. })));
        assert!(matches!(derive_requant(20, 20, 0), Err(Error::ShiftOverflow { .. })));
    }

    #[test]
    fn derive_requant_matches_float_rescale() {
        // int path vs float oracle: q_out ~= q_in * q_w * 2^-(in+w) * 2^out
        for (ie, we, oe) in [(7, 7, 7), (5, 6, 4), (3, 2, 8), (6, 7, 10)] {
            let r = derive_requant(ie, we, oe).unwrap();
            for acc in [-9000, -321, -1, 0, 1, 77, 4000] {
                let real = f64::from(acc) * (2f64).powi(-(ie + we));
                let expect = quantize_float(real, oe).unwrap();
                let got = requantize(acc, &r);
                assert!((i32::from(got) - i32::from(expect)).abs() <= 1, "{acc}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn fixed_multiplier_precision() {
        for f in [0.001, 0.0723, 0.5, 1.0, 3.7] {
            let r = fixed_multiplier(f).unwrap();
            let approx = f64::from(r.eps_mul) * (2f64).powi(-(r.eps_div as i32));
            assert!((approx - f).abs() / f < 1e-4, "{f}: {approx}");
        }
        assert!(fixed_multiplier(0.0).is_err());
        assert!(fixed_multiplier(1e6).is_err());
    }

    #[test]
    fn sqrt_shift_values() {
        assert_eq!(sqrt_shift(1), 0);
        assert_eq!(sqrt_shift(2), 1);
        assert_eq!(sqrt_shift(4), 1);
        assert_eq!(sqrt_shift(16), 2);
        assert_eq!(sqrt_shift(32), 3);
        assert_eq!(sqrt_shift(64), 3);
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(xs in proptest::collection::vec(-0.99f64..0.99, 1..64)) {
            let n = calibrate(&xs).unwrap().chosen_exp;
            let bound = (2f64).powi(-n - 1) + f64::EPSILON;
            for &x in &xs {
                let back = dequantize(quantize_float(x, n).unwrap(), n);
                prop_assert!((back - x).abs() <= bound, "{} -> {} (n={})", x, back, n);
            }
        }

        #[test]
        fn calibrated_exponent_covers_range(xs in proptest::collection::vec(-100f64..100.0, 1..32)) {
            let st = calibrate(&xs).unwrap();
            if st.max_abs > 0.0 {
                prop_assert!(127.0 * (2f64).powi(-st.chosen_exp) >= st.max_abs);
                prop_assert!(127.0 * (2f64).powi(-st.chosen_exp - 1) < st.max_abs);
            }
        }

        #[test]
        fn requantize_monotone(a in -1_000_000i32..1_000_000, d in 0i32..5000,
                               mul in 1u16..=u16::MAX, div in 0u32..31) {
            let r = rp(mul, div);
            prop_assert!(requantize(a, &r) <= requantize(a + d, &r));
        }

        #[test]
        fn requantize_odd_symmetry(x in 0i32..200_000, mul in 1u16..64, div in 1u32..20) {
            let r = rp(mul, div);
            let prod = i64::from(x) * i64::from(mul);
            let half = 1i64 << (div - 1);
            let at_midpoint = prod % (1i64 << div) == half;
            let exact = round_shift(prod, div);
            let in_range = exact < I8_MAX;
            prop_assume!(!at_midpoint && in_range);
            prop_assert_eq!(i32::from(requantize(-x, &r)), -i32::from(requantize(x, &r)));
        }
    }
}
