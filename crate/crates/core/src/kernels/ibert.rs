//! Integer-only softmax, GELU and LayerNorm (I-BERT style).
//!
//! Constants below are the published I-BERT polynomial coefficients. All
//! derived integer constants are computed once from them with `floor`.

use crate::error::{Error, Result};
use crate::quant::{derive_requant, fixed_multiplier, requantize, round_shift};
use crate::tensor::{QuantTensor, RequantParams};

/// `exp(p) ~= EXP_A * (p + EXP_B)^2 + EXP_C` for `p` in `(-ln2, 0]`.
pub const EXP_A: f64 = 0.3585;
pub const EXP_B: f64 = 1.353;
pub const EXP_C: f64 = 0.344;

/// `erf(x) ~= sign(x) * (GELU_A * (min(|x|, -GELU_B) + GELU_B)^2 + 1)`.
pub const GELU_A: f64 = -0.2888;
pub const GELU_B: f64 = -1.769;

/// Fixed-point exponent the softmax runs at internally.
pub const SOFTMAX_WORK_EXP: i32 = 14;
/// Softmax output scale: `127` encodes `127/128`.
pub const SOFTMAX_OUT_EXP: i32 = 7;
/// Range-reduction limit: `exp` of anything below `-30 ln2` contributes nothing.
const MAX_EXP_SHIFT: i64 = 30;

struct ExpConsts {
    ln2: i64,
    b: i64,
    c: i64,
}

fn exp_consts() -> ExpConsts {
    let scale = (2f64).powi(-SOFTMAX_WORK_EXP);
    ExpConsts {
        ln2: (std::f64::consts::LN_2 / scale).floor() as i64,
        b: (EXP_B / scale).floor() as i64,
        c: (EXP_C / (EXP_A * scale * scale)).floor() as i64,
    }
}

/// Integer softmax over one row of int32 logits at scale `2^-in_exp`.
///
/// Subtracts the row max, evaluates `exp` with the second-order polynomial
/// after `ln2` range reduction, and normalizes by the integer row sum.
/// Output is int8 at scale `2^-7`; an all-equal row of length `S` yields
/// `floor(128 / S)` everywhere.
pub fn int_softmax(logits: &[i32], in_exp: i32) -> Vec<i8> {
    let mut out = vec![0i8; logits.len()];
    int_softmax_into(logits, in_exp, &mut out);
    out
}

pub(crate) fn int_softmax_into(logits: &[i32], in_exp: i32, out: &mut [i8]) {
    let Some(&max) = logits.iter().max() else {
        return;
    };
    let k = exp_consts();
    let floor_val = -k.ln2 * MAX_EXP_SHIFT;
    let shift = SOFTMAX_WORK_EXP - in_exp;
    let mut exps = Vec::with_capacity(logits.len());
    let mut sum: i64 = 0;
    for &l in logits {
        let d = i64::from(l) - i64::from(max);
        let d = if shift >= 0 {
            if d == 0 {
                0
            } else if shift >= 40 || d < floor_val >> shift {
                floor_val
            } else {
                (d << shift).max(floor_val)
            }
        } else {
            round_shift(d, (-shift).min(62) as u32).max(floor_val)
        };
        let z = (-d) / k.ln2;
        let p = d + z * k.ln2;
        let poly = (p + k.b) * (p + k.b) + k.c;
        let e = poly >> z;
        sum += e;
        exps.push(e);
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = ((e << SOFTMAX_OUT_EXP) / sum).min(127) as i8;
    }
}

/// Integer GELU for int8 inputs at `2^-in_exp`, output at `2^-out_exp`.
///
/// Precomputes the 256-entry table once; `apply` is a lookup.
#[derive(Debug, Clone)]
pub struct IGelu {
    table: [i8; 256],
    pub in_exp: i32,
    pub out_exp: i32,
}

impl IGelu {
    pub fn new(in_exp: i32, out_exp: i32) -> Result<Self> {
        let s = (2f64).powi(-in_exp);
        // erf is evaluated on x / sqrt(2): same integers, smaller scale
        let s_erf_in = s / std::f64::consts::SQRT_2;
        let q_b = (GELU_B / s_erf_in).floor() as i64;
        let q_c = (1.0 / (GELU_A * s_erf_in * s_erf_in)).floor() as i64;
        let s_erf = GELU_A * s_erf_in * s_erf_in;
        let q_one = (1.0 / s_erf).floor() as i64;
        // gelu = s * s_erf / 2 * q * (erf_q + one_q); s_erf < 0
        let rq = fixed_multiplier(-s * s_erf / 2.0 * (2f64).powi(out_exp))?;
        let mut table = [0i8; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let q = i as i64 - 128;
            let clipped = q.abs().min(-q_b);
            let erf_q = q.signum() * ((clipped + q_b) * (clipped + q_b) + q_c);
            let acc = -q * (erf_q + q_one);
            let acc = acc.clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32;
            *slot = requantize(acc, &rq);
        }
        Ok(IGelu {
            table,
            in_exp,
            out_exp,
        })
    }

    #[inline]
    pub fn eval(&self, q: i8) -> i8 {
        self.table[(i16::from(q) + 128) as usize]
    }

    pub fn apply(&self, xs: &[i8]) -> Vec<i8> {
        xs.iter().map(|&q| self.eval(q)).collect()
    }
}

/// GELU on a whole tensor; the output keeps the input's scale.
pub fn i_gelu(x: &QuantTensor) -> Result<QuantTensor> {
    let g = IGelu::new(x.scale_exp(), x.scale_exp())?;
    QuantTensor::from_data(g.apply(x.data()), x.shape(), x.layout(), x.scale_exp())
}

/// Fractional bits of the normalized value `(x - mean) / std`.
pub const LN_NORM_BITS: i32 = 10;
/// Extra precision bits carried through the integer square root.
pub const LN_STD_GUARD_BITS: u32 = 8;

/// Affine parameters and output quantization of an integer LayerNorm.
///
/// `beta` lives in the accumulator domain `2^-(LN_NORM_BITS + gamma_exp)`
/// and is added before requantization, so a constant row maps to
/// `requantize(beta)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: Vec<i8>,
    pub gamma_exp: i32,
    pub beta: Vec<i32>,
    pub out_exp: i32,
    pub rp: RequantParams,
}

impl LayerNormParams {
    pub fn new(gamma: Vec<i8>, gamma_exp: i32, beta: Vec<i32>, out_exp: i32) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::ShapeMismatch {
                op: "i_layernorm",
                detail: format!("gamma {} vs beta {}", gamma.len(), beta.len()),
            });
        }
        let rp = derive_requant(LN_NORM_BITS, gamma_exp, out_exp)?;
        Ok(LayerNormParams {
            gamma,
            gamma_exp,
            beta,
            out_exp,
            rp,
        })
    }
}

fn isqrt_newton(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    let bits = 128 - n.leading_zeros();
    let mut x = 1u128 << bits.div_ceil(2);
    loop {
        let y = (x + n / x) / 2;
        if y >= x {
            return x;
        }
        x = y;
    }
}

/// Integer LayerNorm over one row. The input scale cancels out.
pub fn i_layernorm(x: &[i8], params: &LayerNormParams) -> Result<Vec<i8>> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidShape {
            shape: vec![n],
            reason: "layernorm row needs at least 2 elements".into(),
        });
    }
    if params.gamma.len() != n {
        return Err(Error::ShapeMismatch {
            op: "i_layernorm",
            detail: format!("row length {n} vs gamma {}", params.gamma.len()),
        });
    }
    let n_i = n as i64;
    let sum: i64 = x.iter().map(|&v| i64::from(v)).sum();
    // n * (x - mean), exact
    let centered: Vec<i64> = x.iter().map(|&v| n_i * i64::from(v) - sum).collect();
    let sq: i128 = centered.iter().map(|&c| i128::from(c) * i128::from(c)).sum();
    let var = ((sq << (2 * LN_STD_GUARD_BITS)) / n as i128).max(1);
    let std = isqrt_newton(var as u128) as i128;
    let num_shift = LN_NORM_BITS as u32 + LN_STD_GUARD_BITS;
    let out = centered
        .iter()
        .zip(&params.gamma)
        .zip(&params.beta)
        .map(|((&c, &g), &b)| {
            let num = i128::from(c) << num_shift;
            // round half up
            let norm = (2 * num + std).div_euclid(2 * std) as i64;
            let acc = norm * i64::from(g) + i64::from(b);
            let acc = acc.clamp(i64::from(i32::MIN), i64::from(i32::MAX)) as i32;
            requantize(acc, &params.rp)
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits() {
        assert_eq!(int_softmax(&[5, 5, 5, 5], 8), vec![32; 4]);
        assert_eq!(int_softmax(&[0; 3], 0), vec![42; 3]);
        assert_eq!(int_softmax(&[-7], 3), vec![127]);
        assert!(int_softmax(&[], 3).is_empty());
    }

    #[test]
    fn softmax_dominant_logit() {
        assert_eq!(int_softmax(&[1 << 20, 0, -5, 3], 8), vec![127, 0, 0, 0]);
        assert_eq!(int_softmax(&[0, i32::MAX], 0), vec![0, 127]);
        assert_eq!(int_softmax(&[i32::MIN, i32::MAX], 20), vec![0, 127]);
    }

    #[test]
    fn softmax_tracks_float() {
        let logits = [-300, 120, 40, 0, 255, -1000];
        let exp = 8;
        let out = int_softmax(&logits, exp);
        let real: Vec<f64> = logits.iter().map(|&l| f64::from(l) / 256.0).collect();
        let m = real.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = real.iter().map(|r| (r - m).exp()).sum();
        for (o, r) in out.iter().zip(&real) {
            let want = (r - m).exp() / z * 128.0;
            assert!((f64::from(*o) - want).abs() <= 2.0, "{o} vs {want}");
        }
    }

    #[test]
    fn softmax_row_sum_close_to_one() {
        for s in 1..20usize {
            let logits: Vec<i32> = (0..s as i32).map(|i| (i * 37) % 200 - 100).collect();
            let sum: i32 = int_softmax(&logits, 6).iter().map(|&v| i32::from(v)).sum();
            assert!((sum - 128).abs() <= s as i32, "S={s}: {sum}");
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let g = IGelu::new(4, 4).unwrap();
        assert_eq!(g.eval(0), 0);
        for q in 100..=127i8 {
            assert!((i32::from(g.eval(q)) - i32::from(q)).abs() <= 2, "{q} -> {}", g.eval(q));
        }
        assert!(g.eval(-128).abs() <= 1);
    }

    #[test]
    fn gelu_close_to_float() {
        let g = IGelu::new(4, 4).unwrap();
        let mut worst = 0f64;
        for q in -128..=127i8 {
            let x = f64::from(q) / 16.0;
            let want = 0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2)) * 16.0;
            worst = worst.max((f64::from(g.eval(q)) - want).abs());
        }
        assert!(worst <= 3.0, "max error {worst} LSB");
    }

    #[test]
    fn gelu_monotone_on_nonnegative_half() {
        let g = IGelu::new(4, 4).unwrap();
        for q in 0..127i8 {
            assert!(g.eval(q) <= g.eval(q + 1));
        }
    }

    // Abramowitz-Stegun 7.1.26 is too coarse here; use the series / continued fraction pair.
    pub(crate) fn erf(x: f64) -> f64 {
        let t = x.abs();
        let v = if t < 3.0 {
            let mut term = t;
            let mut sum = t;
            let mut k = 0.0;
            loop {
                k += 1.0;
                term *= -t * t / k;
                let add = term / (2.0 * k + 1.0);
                sum += add;
                if add.abs() < 1e-17 {
                    break;
                }
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        } else {
            // erfc continued fraction
            let mut f = 0.0;
            for k in (1..60).rev() {
                f = f64::from(k) / 2.0 / (t + f);
            }
            1.0 - (-t * t).exp() / std::f64::consts::PI.sqrt() / (t + f)
        };
        v.copysign(x)
    }

    #[test]
    fn erf_reference_values() {
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-12);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-12);
        assert!((erf(3.5) - 0.999_999_256_901_627_7).abs() < 1e-12);
    }

    fn ln_params(n: usize, gamma: i8, beta: i32, out_exp: i32) -> LayerNormParams {
        LayerNormParams::new(vec![gamma; n], 6, vec![beta; n], out_exp).unwrap()
    }

    #[test]
    fn layernorm_constant_row() {
        let p = ln_params(8, 64, 5 << 12, 5);
        let out = i_layernorm(&[17; 8], &p).unwrap();
        let expect = requantize(5 << 12, &p.rp);
        assert_eq!(out, vec![expect; 8]);
    }

    #[test]
    fn layernorm_antisymmetric_row() {
        let p = ln_params(2, 64, 0, 5);
        let out = i_layernorm(&[-40, 40], &p).unwrap();
        // normalized values are exactly -1 and +1
        assert!((i32::from(out[0]) + i32::from(out[1])).abs() <= 1);
        assert_eq!(out[1], 32);
    }

    #[test]
    fn layernorm_rejects_short_rows() {
        let p = ln_params(1, 1, 0, 0);
        assert!(i_layernorm(&[3], &p).is_err());
        let p = ln_params(4, 1, 0, 0);
        assert!(i_layernorm(&[3, 4], &p).is_err());
    }

    #[test]
    fn isqrt_exact() {
        for n in 0..5000u128 {
            let r = isqrt_newton(n);
            assert!(r * r <= n && (r + 1) * (r + 1) > n);
        }
        let big = u128::MAX >> 4;
        let r = isqrt_newton(big);
        assert!(r * r <= big && (r + 1).checked_mul(r + 1).map_or(true, |v| v > big));
    }
}
