//! Reference implementations used as ground truth.
//!
//! The float path evaluates attention directly in `f64`. The naive integer
//! kernels walk tensors by logical coordinates in the obvious loop order and
//! share nothing with [`crate::kernels`] except [`requantize`] and the
//! published polynomial constants; the integer softmax, GELU and LayerNorm
//! are re-derived here with different arithmetic (division instead of
//! shifts, binary-search square root, a moment-based variance).

use crate::error::{Error, Result};
use crate::graph::{AttentionBlock, ScorePath};
use crate::kernels::{
    FwsaWeights, LayerNormParams, LinearWeights, EXP_A, EXP_B, EXP_C, GELU_A, GELU_B, LN_NORM_BITS,
    LN_STD_GUARD_BITS, SOFTMAX_OUT_EXP, SOFTMAX_WORK_EXP,
};
use crate::quant::{fixed_multiplier, requantize, ScoreScale};
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

// ---------------------------------------------------------------------------
// float reference

/// Float weights in logical layout: `wq`, `wk`, `wv` are `(H, E, P)`,
/// `wo` is `(H*P, E)`. Biases may be empty (treated as zero).
#[derive(Debug, Clone, PartialEq)]
pub struct FloatWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bv: Vec<f64>,
    pub bo: Vec<f64>,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::ShapeMismatch {
            op: "float oracle",
            detail: format!("{what} has {got} elements, expected {want}"),
        });
    }
    Ok(())
}

fn check_float(x: &[f64], w: &FloatWeights, dims: AttnDims, need_qk: bool) -> Result<()> {
    let AttnDims { s, e, p, h } = dims;
    check_len("X", x.len(), s * e)?;
    if need_qk {
        check_len("Wq", w.wq.len(), h * e * p)?;
        check_len("Wk", w.wk.len(), h * e * p)?;
    }
    check_len("Wv", w.wv.len(), h * e * p)?;
    check_len("Wo", w.wo.len(), h * p * e)?;
    if !w.bv.is_empty() {
        check_len("bv", w.bv.len(), h * p)?;
    }
    if !w.bo.is_empty() {
        check_len("bo", w.bo.len(), e)?;
    }
    Ok(())
}

/// `X W[h]` for a `(H, E, P)` weight, returned as `[h][s][p]`.
fn project(x: &[f64], w: &[f64], bias: &[f64], dims: AttnDims) -> Vec<f64> {
    let AttnDims { s, e, p, h } = dims;
    let mut out = vec![0.0; h * s * p];
    for hh in 0..h {
        for ss in 0..s {
            for pp in 0..p {
                let mut acc = bias.get(hh * p + pp).copied().unwrap_or(0.0);
                for ee in 0..e {
                    acc += x[ss * e + ee] * w[(hh * e + ee) * p + pp];
                }
                out[(hh * s + ss) * p + pp] = acc;
            }
        }
    }
    out
}

fn softmax_rows(scores: &mut [f64], n: usize) {
    for row in scores.chunks_mut(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Attention maps `softmax(Q K^T / sqrt(P))` as `[h][s][s']`.
pub fn float_attention_map_mhsa(x: &[f64], wq: &[f64], wk: &[f64], dims: AttnDims) -> Vec<f64> {
    let AttnDims { s, p, h, .. } = dims;
    let q = project(x, wq, &[], dims);
    let k = project(x, wk, &[], dims);
    let temp = (p as f64).sqrt();
    let mut a = vec![0.0; h * s * s];
    for hh in 0..h {
        for i in 0..s {
            for j in 0..s {
                let dot: f64 = (0..p).map(|pp| q[(hh * s + i) * p + pp] * k[(hh * s + j) * p + pp]).sum();
                a[(hh * s + i) * s + j] = dot / temp;
            }
        }
    }
    softmax_rows(&mut a, s);
    a
}

/// Attention maps `softmax(X W* X^T / sqrt(P))` as `[h][s][s']`, with
/// `wstar` in logical `(H, E, E)` layout.
pub fn float_attention_map_fwsa(x: &[f64], wstar: &[f64], dims: AttnDims) -> Vec<f64> {
    let AttnDims { s, e, p, h } = dims;
    let temp = (p as f64).sqrt();
    let mut a = vec![0.0; h * s * s];
    for hh in 0..h {
        // M2 = X W*[h]
        let mut m2 = vec![0.0; s * e];
        for i in 0..s {
            for f in 0..e {
                m2[i * e + f] = (0..e).map(|g| x[i * e + g] * wstar[(hh * e + g) * e + f]).sum();
            }
        }
        for i in 0..s {
            for j in 0..s {
                let dot: f64 = (0..e).map(|f| m2[i * e + f] * x[j * e + f]).sum();
                a[(hh * s + i) * s + j] = dot / temp;
            }
        }
    }
    softmax_rows(&mut a, s);
    a
}

fn attend_and_project(a: &[f64], x: &[f64], w: &FloatWeights, dims: AttnDims) -> Vec<f64> {
    let AttnDims { s, e, p, h } = dims;
    let v = project(x, &w.wv, &w.bv, dims);
    // concat over heads: m[s][h*p]
    let mut m = vec![0.0; s * h * p];
    for hh in 0..h {
        for i in 0..s {
            for pp in 0..p {
                m[i * h * p + hh * p + pp] = (0..s).map(|j| a[(hh * s + i) * s + j] * v[(hh * s + j) * p + pp]).sum();
            }
        }
    }
    let mut out = vec![0.0; s * e];
    for i in 0..s {
        for f in 0..e {
            let mut acc = w.bo.get(f).copied().unwrap_or(0.0);
            for k in 0..h * p {
                acc += m[i * h * p + k] * w.wo[k * e + f];
            }
            out[i * e + f] = acc;
        }
    }
    out
}

/// Multi-head self-attention in `f64`, no fusions: `(S, E) -> (S, E)`.
pub fn float_mhsa(x: &[f64], w: &FloatWeights, dims: AttnDims) -> Result<Vec<f64>> {
    check_float(x, w, dims, true)?;
    let a = float_attention_map_mhsa(x, &w.wq, &w.wk, dims);
    Ok(attend_and_project(&a, x, w, dims))
}

/// Fused-weight attention in `f64`; `wq`/`wk` of `w` are ignored.
pub fn float_fwsa(x: &[f64], wstar: &[f64], w: &FloatWeights, dims: AttnDims) -> Result<Vec<f64>> {
    check_float(x, w, dims, false)?;
    check_len("W*", wstar.len(), dims.h * dims.e * dims.e)?;
    let a = float_attention_map_fwsa(x, wstar, dims);
    Ok(attend_and_project(&a, x, w, dims))
}

// ---------------------------------------------------------------------------
// naive integer kernels

fn at(t: &QuantTensor, c: &[usize]) -> i32 {
    i32::from(t.index(c).expect("oracle coordinate in range"))
}

fn shape_err(kind: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op: kind, detail }
}

/// Which projection layout to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjLayout {
    Hsp,
    Hps,
}

/// Projection `O[h][s][p] = requant(sum_e X[s][e] W[h][e][p] + b)`.
pub fn naive_linear(x: &QuantTensor, w: &LinearWeights, dims: AttnDims, layout: ProjLayout) -> Result<QuantTensor> {
    let AttnDims { s, e, p, h } = dims;
    if x.shape() != [s, e] || w.w.shape() != [h, p, e] {
        return Err(shape_err("naive_linear", format!("X {:?}, W {:?}", x.shape(), w.w.shape())));
    }
    let (shape, lay) = match layout {
        ProjLayout::Hsp => ([h, s, p], Layout::Hsp),
        ProjLayout::Hps => ([h, p, s], Layout::Hps),
    };
    let mut out = QuantTensor::zeros(&shape, lay, w.out_exp)?;
    for hh in 0..h {
        for ss in 0..s {
            for pp in 0..p {
                let mut acc = w.rp.bias_at(hh * p + pp);
                for ee in 0..e {
                    acc += at(x, &[ss, ee]) * at(&w.w, &[hh, pp, ee]);
                }
                let v = requantize(acc, &w.rp);
                match layout {
                    ProjLayout::Hsp => out.set(&[hh, ss, pp], v)?,
                    ProjLayout::Hps => out.set(&[hh, pp, ss], v)?,
                }
            }
        }
    }
    Ok(out)
}

/// Score GEMM + softmax; `q`, `k` in `HSP`, output `SHS`.
pub fn naive_gemm1_softmax(q: &QuantTensor, k: &QuantTensor, score: &ScoreScale, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, p, h, .. } = dims;
    if q.shape() != [h, s, p] || k.shape() != [h, s, p] {
        return Err(shape_err("naive_gemm1_softmax", format!("Q {:?}, K {:?}", q.shape(), k.shape())));
    }
    let mut out = QuantTensor::zeros(&[s, h, s], Layout::Shs, SOFTMAX_OUT_EXP)?;
    for hh in 0..h {
        for i in 0..s {
            let row: Vec<i32> = (0..s)
                .map(|j| {
                    let dot: i64 = (0..p).map(|pp| i64::from(at(q, &[hh, i, pp]) * at(k, &[hh, j, pp]))).sum();
                    score.apply(dot)
                })
                .collect();
            for (j, v) in naive_int_softmax(&row, score.logit_exp).into_iter().enumerate() {
                out.set(&[i, hh, j], v)?;
            }
        }
    }
    Ok(out)
}

/// Value GEMM; `a` in `SHS`, `v` in `HPS`, output `SHP`.
pub fn naive_gemm2(a: &QuantTensor, v: &QuantTensor, rp: &RequantParams, out_exp: i32, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, p, h, .. } = dims;
    if a.shape() != [s, h, s] || v.shape() != [h, p, s] {
        return Err(shape_err("naive_gemm2", format!("A {:?}, V {:?}", a.shape(), v.shape())));
    }
    let mut out = QuantTensor::zeros(&[s, h, p], Layout::Shp, out_exp)?;
    for hh in 0..h {
        for pp in 0..p {
            for i in 0..s {
                let acc: i32 = (0..s).map(|j| at(a, &[i, hh, j]) * at(v, &[hh, pp, j])).sum();
                out.set(&[i, hh, pp], requantize(acc, rp))?;
            }
        }
    }
    Ok(out)
}

/// Output projection; `m1` in `SHP`, weights `(E, H*P)`, output `SE`.
pub fn naive_out(m1: &QuantTensor, w: &LinearWeights, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, e, p, h } = dims;
    if m1.shape() != [s, h, p] || w.w.shape() != [e, h * p] {
        return Err(shape_err("naive_out", format!("M1 {:?}, W {:?}", m1.shape(), w.w.shape())));
    }
    let mut out = QuantTensor::zeros(&[s, e], Layout::Se, w.out_exp)?;
    for ee in 0..e {
        for i in 0..s {
            let mut acc = w.rp.bias_at(ee);
            for hh in 0..h {
                for pp in 0..p {
                    acc += at(m1, &[i, hh, pp]) * at(&w.w, &[ee, hh * p + pp]);
                }
            }
            out.set(&[i, ee], requantize(acc, &w.rp))?;
        }
    }
    Ok(out)
}

/// Fused-weight attention in two explicit stages; output `SHS`.
pub fn naive_fwsa(x: &QuantTensor, fw: &FwsaWeights, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, e, h, .. } = dims;
    if x.shape() != [s, e] || fw.w_star.shape() != [h, e, e] {
        return Err(shape_err("naive_fwsa", format!("X {:?}, W* {:?}", x.shape(), fw.w_star.shape())));
    }
    let mut out = QuantTensor::zeros(&[s, h, s], Layout::Shs, SOFTMAX_OUT_EXP)?;
    for hh in 0..h {
        let mut m2 = vec![vec![0i32; e]; s];
        for (i, row) in m2.iter_mut().enumerate() {
            for (f, slot) in row.iter_mut().enumerate() {
                let acc: i32 = (0..e).map(|g| at(x, &[i, g]) * at(&fw.w_star, &[hh, f, g])).sum();
                *slot = i32::from(requantize(acc, &fw.rp));
            }
        }
        for (i, m2_row) in m2.iter().enumerate() {
            let logits: Vec<i32> = (0..s)
                .map(|j| {
                    let dot: i64 = (0..e).map(|f| i64::from(m2_row[f] * at(x, &[j, f]))).sum();
                    fw.score.apply(dot)
                })
                .collect();
            for (j, v) in naive_int_softmax(&logits, fw.score.logit_exp).into_iter().enumerate() {
                out.set(&[i, hh, j], v)?;
            }
        }
    }
    Ok(out)
}

/// Integer softmax with the same semantics as the kernel, written with
/// `i128` division instead of shifts.
pub fn naive_int_softmax(logits: &[i32], in_exp: i32) -> Vec<i8> {
    if logits.is_empty() {
        return Vec::new();
    }
    let scale = (2f64).powi(-SOFTMAX_WORK_EXP);
    let ln2 = (std::f64::consts::LN_2 / scale).floor() as i128;
    let b = (EXP_B / scale).floor() as i128;
    let c = (EXP_C / (EXP_A * scale * scale)).floor() as i128;
    let lowest = -30 * ln2;
    let max = i128::from(*logits.iter().max().unwrap());
    let shift = SOFTMAX_WORK_EXP - in_exp;
    let exps: Vec<i128> = logits
        .iter()
        .map(|&l| {
            let d = i128::from(l) - max;
            let d = if shift >= 0 {
                d * (1i128 << shift.min(64))
            } else {
                let k = (-shift).min(100) as u32;
                let div = 1i128 << k;
                (d + div / 2).div_euclid(div)
            };
            let d = d.max(lowest);
            let z = (-d).div_euclid(ln2);
            let r = d + z * ln2;
            ((r + b).pow(2) + c).div_euclid(1i128 << z)
        })
        .collect();
    let total: i128 = exps.iter().sum();
    exps.iter()
        .map(|&v| (v * 128 / total).min(127) as i8)
        .collect()
}

/// GELU of one int8 value, evaluated directly (no table).
pub fn naive_i_gelu(q: i8, in_exp: i32, out_exp: i32) -> Result<i8> {
    let s = (2f64).powi(-in_exp);
    let s_erf_in = s / std::f64::consts::SQRT_2;
    let qb = (GELU_B / s_erf_in).floor() as i128;
    let qc = (1.0 / (GELU_A * s_erf_in * s_erf_in)).floor() as i128;
    let s_erf = GELU_A * s_erf_in * s_erf_in;
    let one = (1.0 / s_erf).floor() as i128;
    let rq = fixed_multiplier(-s * s_erf / 2.0 * (2f64).powi(out_exp))?;
    let x = i128::from(q);
    let t = x.abs().min(-qb) + qb;
    let erf = match x.cmp(&0) {
        std::cmp::Ordering::Less => -(t * t + qc),
        std::cmp::Ordering::Equal => 0,
        std::cmp::Ordering::Greater => t * t + qc,
    };
    let acc = (-x * (erf + one)).clamp(i128::from(i32::MIN), i128::from(i32::MAX)) as i32;
    Ok(requantize(acc, &rq))
}

fn isqrt_bisect(n: u128) -> u128 {
    let (mut lo, mut hi) = (0u128, 1u128 << 64);
    // invariant: lo^2 <= n < hi^2
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        match mid.checked_mul(mid) {
            Some(sq) if sq <= n => lo = mid,
            _ => hi = mid,
        }
    }
    lo
}

/// Integer LayerNorm of one row, variance from raw moments.
pub fn naive_i_layernorm(x: &[i8], params: &LayerNormParams) -> Result<Vec<i8>> {
    let n = x.len();
    if n < 2 || params.gamma.len() != n || params.beta.len() != n {
        return Err(shape_err("naive_i_layernorm", format!("row {n}, gamma {}", params.gamma.len())));
    }
    let n_i = n as i128;
    let sum: i128 = x.iter().map(|&v| i128::from(v)).sum();
    let sum_sq: i128 = x.iter().map(|&v| i128::from(v) * i128::from(v)).sum();
    // sum_i (n x_i - sum)^2 = n (n sum_sq - sum^2)
    let centered_sq = n_i * (n_i * sum_sq - sum * sum);
    let var = (centered_sq * (1i128 << (2 * LN_STD_GUARD_BITS)) / n_i).max(1);
    let std = isqrt_bisect(var as u128) as i128;
    let scale = 1i128 << (LN_NORM_BITS as u32 + LN_STD_GUARD_BITS);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let c = n_i * i128::from(x[i]) - sum;
        let norm = (c * scale + std / 2).div_euclid(std);
        let acc = norm * i128::from(params.gamma[i]) + i128::from(params.beta[i]);
        let acc = acc.clamp(i128::from(i32::MIN), i128::from(i32::MAX)) as i32;
        out.push(requantize(acc, &params.rp));
    }
    Ok(out)
}

/// Naive kernel selector with its inputs.
#[derive(Debug, Clone, Copy)]
pub enum NaiveKernel<'a> {
    Irl {
        x: &'a QuantTensor,
        w: &'a LinearWeights,
    },
    Wrl {
        x: &'a QuantTensor,
        w: &'a LinearWeights,
    },
    Gemm1Softmax {
        q: &'a QuantTensor,
        k: &'a QuantTensor,
        score: &'a ScoreScale,
    },
    Gemm2 {
        a: &'a QuantTensor,
        v: &'a QuantTensor,
        rp: &'a RequantParams,
        out_exp: i32,
    },
    Out {
        m1: &'a QuantTensor,
        w: &'a LinearWeights,
    },
    Fwsa {
        x: &'a QuantTensor,
        fw: &'a FwsaWeights,
    },
}

pub fn naive_int_kernel(kernel: NaiveKernel<'_>, dims: AttnDims) -> Result<QuantTensor> {
    match kernel {
        NaiveKernel::Irl { x, w } => naive_linear(x, w, dims, ProjLayout::Hsp),
        NaiveKernel::Wrl { x, w } => naive_linear(x, w, dims, ProjLayout::Hps),
        NaiveKernel::Gemm1Softmax { q, k, score } => naive_gemm1_softmax(q, k, score, dims),
        NaiveKernel::Gemm2 { a, v, rp, out_exp } => naive_gemm2(a, v, rp, out_exp, dims),
        NaiveKernel::Out { m1, w } => naive_out(m1, w, dims),
        NaiveKernel::Fwsa { x, fw } => naive_fwsa(x, fw, dims),
    }
}

/// Intermediates of a naive block run.
#[derive(Debug, Clone)]
pub struct NaiveTrace {
    pub a: QuantTensor,
    pub v: QuantTensor,
    pub m1: QuantTensor,
    pub out: QuantTensor,
}

/// The whole block through the naive kernels.
pub fn naive_block(block: &AttentionBlock, x: &QuantTensor) -> Result<NaiveTrace> {
    let dims = block.dims;
    let a = match &block.scores {
        ScorePath::Mhsa { q, k, score } => {
            let qt = naive_linear(x, q, dims, ProjLayout::Hsp)?;
            let kt = naive_linear(x, k, dims, ProjLayout::Hsp)?;
            naive_gemm1_softmax(&qt, &kt, score, dims)?
        }
        ScorePath::Fwsa(fw) => naive_fwsa(x, fw, dims)?,
    };
    let v = naive_linear(x, &block.v, dims, ProjLayout::Hps)?;
    let m1 = naive_gemm2(&a, &v, &block.m1_rp, block.m1_exp, dims)?;
    let out = naive_out(&m1, &block.out, dims)?;
    Ok(NaiveTrace { a, v, m1, out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_oracle_examples() {
        assert_eq!(naive_int_softmax(&[0, 0, 0, 0], 5), vec![32; 4]);
        assert_eq!(naive_int_softmax(&[9], 5), vec![127]);
        assert_eq!(naive_int_softmax(&[0, 1 << 24], 4), vec![0, 127]);
    }

    #[test]
    fn gemm1_softmax_two_tokens() {
        let dims = AttnDims::new(2, 1, 1, 1).unwrap();
        let q = QuantTensor::from_data(vec![0, 127], &[1, 2, 1], Layout::Hsp, 0).unwrap();
        let k = QuantTensor::from_data(vec![0, 127], &[1, 2, 1], Layout::Hsp, 0).unwrap();
        let score = ScoreScale::for_attention(0, 0, 1);
        let a = naive_gemm1_softmax(&q, &k, &score, dims).unwrap();
        // row 1: logits (0, 16129) at scale 1
        assert_eq!(a.index(&[1, 0, 1]).unwrap(), 127);
        assert_eq!(a.index(&[1, 0, 0]).unwrap(), 0);
    }

    #[test]
    fn naive_linear_identity() {
        let dims = AttnDims::new(3, 2, 2, 1).unwrap();
        let x = QuantTensor::from_data(vec![1, -2, 3, -4, 5, -6], &[3, 2], Layout::Se, 0).unwrap();
        let w = QuantTensor::from_data(vec![1, 0, 0, 1], &[1, 2, 2], Layout::Hpe, 0).unwrap();
        let lw = LinearWeights {
            w,
            rp: RequantParams::new(1, 0).unwrap(),
            out_exp: 0,
        };
        let o = naive_linear(&x, &lw, dims, ProjLayout::Hsp).unwrap();
        assert_eq!(o.data(), x.data());
        let again = naive_linear(&x, &lw, dims, ProjLayout::Hsp).unwrap();
        assert_eq!(o, again);
    }

    #[test]
    fn float_single_token_scalar_chain() {
        let dims = AttnDims::new(1, 1, 1, 1).unwrap();
        let w = FloatWeights {
            wq: vec![0.3],
            wk: vec![-2.0],
            wv: vec![1.5],
            wo: vec![-0.5],
            bv: vec![],
            bo: vec![],
        };
        let out = float_mhsa(&[2.0], &w, dims).unwrap();
        // softmax of a single score is 1: out = x * wv * wo
        assert!((out[0] - 2.0 * 1.5 * -0.5).abs() < 1e-12);
    }

    #[test]
    fn float_shape_errors() {
        let dims = AttnDims::new(2, 2, 1, 1).unwrap();
        let w = FloatWeights {
            wq: vec![0.0; 2],
            wk: vec![0.0; 2],
            wv: vec![0.0; 2],
            wo: vec![0.0; 3],
            bv: vec![],
            bo: vec![],
        };
        assert!(float_mhsa(&[0.0; 4], &w, dims).is_err());
    }
}
