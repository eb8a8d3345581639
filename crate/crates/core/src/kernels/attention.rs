//! Score GEMM fused with softmax, the value GEMM, and the fused-weight
//! attention kernel.

use std::ops::Range;

use super::ibert::{int_softmax_into, SOFTMAX_OUT_EXP};
use super::linear::{linear_core, LinearShape, OutOrder};
use super::{blocked_dots, rows, BlockOrder};
use crate::error::{Error, Result};
use crate::quant::{requantize, ScoreScale};
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ScoreShape {
    pub heads: usize,
    pub rows_q: usize,
    pub rows_k: usize,
    /// Reduction length (`P` for MHSA, `E` for fused-weight attention).
    pub red: usize,
    /// Key rows are shared by all heads (`X` in the fused-weight kernel).
    pub shared_k: bool,
}

/// Attention rows `A[s][h][:] = softmax(score(q[h][s] . k[h][:]))`, loop
/// order `S -> H -> S'`, each row finished before the next starts.
///
/// `q` is `[heads][rows_q][red]`, `k` is `[heads][rows_k][red]` (or
/// `[rows_k][red]` when shared), `out` is `SHS`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn score_core(
    q: &[i8],
    k: &[i8],
    score: &ScoreScale,
    shape: ScoreShape,
    heads: Range<usize>,
    row_range: Range<usize>,
    out: &mut [i8],
) {
    let ScoreShape {
        heads: n_heads,
        rows_q,
        rows_k,
        red,
        shared_k,
    } = shape;
    let mut logits = vec![0i32; 4 * rows_k];
    let mut s = row_range.start;
    while s < row_range.end {
        let quad = (row_range.end - s).min(4);
        for h in heads.clone() {
            let q_head = &q[h * rows_q * red..(h + 1) * rows_q * red];
            let a = rows(&q_head[s * red..(s + quad) * red], red);
            let k_head = if shared_k {
                &k[..rows_k * red]
            } else {
                &k[h * rows_k * red..(h + 1) * rows_k * red]
            };
            let b = rows(k_head, red);
            blocked_dots(&a, &b, BlockOrder::QuadsOuter, |i, j, acc| {
                logits[i * rows_k + j] = score.apply(i64::from(acc));
            });
            for i in 0..quad {
                let o = ((s + i) * n_heads + h) * rows_k;
                int_softmax_into(
                    &logits[i * rows_k..(i + 1) * rows_k],
                    score.logit_exp,
                    &mut out[o..o + rows_k],
                );
            }
        }
        s += quad;
    }
}

/// `M1[s][h][p] = requant(sum_s' A[s][h][s'] * V[h][p][s'])`, loop order
/// `S -> H -> P`. `a` is `SHS`, `v` is `HPS`, `out` is `SHP`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn m2_core(
    a: &[i8],
    v: &[i8],
    rp: &RequantParams,
    heads_total: usize,
    rows_q: usize,
    rows_k: usize,
    feats: usize,
    heads: Range<usize>,
    row_range: Range<usize>,
    out: &mut [i8],
) {
    debug_assert!(row_range.end <= rows_q);
    let mut s = row_range.start;
    while s < row_range.end {
        let quad = (row_range.end - s).min(4);
        for h in heads.clone() {
            let a_rows: Vec<&[i8]> = (s..s + quad)
                .map(|r| {
                    let o = (r * heads_total + h) * rows_k;
                    &a[o..o + rows_k]
                })
                .collect();
            let v_rows = rows(&v[h * feats * rows_k..(h + 1) * feats * rows_k], rows_k);
            blocked_dots(&a_rows, &v_rows, BlockOrder::QuadsOuter, |i, p, acc| {
                out[((s + i) * heads_total + h) * feats + p] = requantize(acc, rp);
            });
        }
        s += quad;
    }
}

fn expect(t: &QuantTensor, layout: Layout, shape: &[usize], op: &'static str, name: &str) -> Result<()> {
    if t.layout() != layout || t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{name} is {:?} {}, expected {layout} {shape:?}", t.shape(), t.layout()),
        });
    }
    Ok(())
}

/// Score GEMM `Q K^T` (without materializing `K^T`) fused with the
/// integer softmax. Output `SHS` at scale `2^-7`.
pub fn matmul_softmax(q: &QuantTensor, k: &QuantTensor, score: &ScoreScale, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, p, h, .. } = dims;
    expect(q, Layout::Hsp, &[h, s, p], "matmul_softmax", "Q")?;
    expect(k, Layout::Hsp, &[h, s, p], "matmul_softmax", "K")?;
    let mut out = QuantTensor::zeros(&[s, h, s], Layout::Shs, SOFTMAX_OUT_EXP)?;
    let shape = ScoreShape {
        heads: h,
        rows_q: s,
        rows_k: s,
        red: p,
        shared_k: false,
    };
    score_core(q.data(), k.data(), score, shape, 0..h, 0..s, out.data_mut());
    Ok(out)
}

/// Value GEMM `A V`. Output `SHP`, so each row of `M1` is the
/// concatenation of the head outputs.
pub fn matmul_m2(a: &QuantTensor, v: &QuantTensor, rp: &RequantParams, out_exp: i32, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, p, h, .. } = dims;
    expect(a, Layout::Shs, &[s, h, s], "matmul_m2", "A")?;
    expect(v, Layout::Hps, &[h, p, s], "matmul_m2", "V")?;
    let mut out = QuantTensor::zeros(&[s, h, p], Layout::Shp, out_exp)?;
    m2_core(a.data(), v.data(), rp, h, s, s, p, 0..h, 0..s, out.data_mut());
    Ok(out)
}

/// Fused weight `W* = Wq Wk^T` with the requantization of `X W*` and the
/// score scaling of `(X W*) X^T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FwsaWeights {
    /// `(H, E, E)` in [`Layout::Hee`], indexed `[h][e_out][e_in]`.
    pub w_star: QuantTensor,
    pub rp: RequantParams,
    pub m2_exp: i32,
    pub score: ScoreScale,
}

/// Stage 1 of the fused-weight kernel: `M2 = X W*` in `HSE`, loop `H -> S -> E`.
pub(crate) fn fwsa_stage1(x: &[i8], fw: &FwsaWeights, heads_total: usize, rows: usize, e: usize, heads: Range<usize>, m2: &mut [i8]) {
    let shape = LinearShape {
        heads: heads_total,
        rows,
        feats: e,
        red: e,
    };
    linear_core(x, fw.w_star.data(), &fw.rp, shape, OutOrder::RowMajor, heads, 0..rows, m2);
}

/// Fused-weight self-attention `A = softmax(X W* X^T)`, output `SHS`.
///
/// `M2 = X W*` is requantized to int8 between the two stages; its
/// reduction against `X` runs over `E` instead of `P`.
pub fn fwsa_fused(x: &QuantTensor, fw: &FwsaWeights, dims: AttnDims) -> Result<QuantTensor> {
    let AttnDims { s, e, h, .. } = dims;
    expect(x, Layout::Se, &[s, e], "fwsa_fused", "X")?;
    expect(&fw.w_star, Layout::Hee, &[h, e, e], "fwsa_fused", "W*")?;
    let mut m2 = vec![0i8; h * s * e];
    fwsa_stage1(x.data(), fw, h, s, e, 0..h, &mut m2);
    let mut out = QuantTensor::zeros(&[s, h, s], Layout::Shs, SOFTMAX_OUT_EXP)?;
    let shape = ScoreShape {
        heads: h,
        rows_q: s,
        rows_k: s,
        red: e,
        shared_k: true,
    };
    score_core(&m2, x.data(), &fw.score, shape, 0..h, 0..s, out.data_mut());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hsp(h: usize, s: usize, p: usize, f: impl Fn(usize) -> i8) -> QuantTensor {
        QuantTensor::from_data((0..h * s * p).map(f).collect(), &[h, s, p], Layout::Hsp, 5).unwrap()
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let dims = AttnDims::new(4, 8, 8, 2).unwrap();
        let q = hsp(2, 4, 8, |_| 0);
        let k = hsp(2, 4, 8, |i| (i as i8).wrapping_mul(13));
        let a = matmul_softmax(&q, &k, &ScoreScale::for_attention(5, 5, 8), dims).unwrap();
        assert!(a.data().iter().all(|&v| v == 32));
    }

    #[test]
    fn single_token_saturates() {
        let dims = AttnDims::new(1, 3, 3, 4).unwrap();
        let q = hsp(4, 1, 3, |i| i as i8);
        let a = matmul_softmax(&q, &q, &ScoreScale::for_attention(5, 5, 3), dims).unwrap();
        assert_eq!(a.data(), &[127; 4]);
    }

    #[test]
    fn one_hot_attention_selects_values() {
        let dims = AttnDims::new(5, 4, 3, 2).unwrap();
        let mut a = QuantTensor::zeros(&[5, 2, 5], Layout::Shs, 7).unwrap();
        for s in 0..5 {
            for h in 0..2 {
                a.set(&[s, h, s], 127).unwrap();
            }
        }
        let v = QuantTensor::from_data((0..30).map(|i| (i * 9 % 256) as u8 as i8).collect(), &[2, 3, 5], Layout::Hps, 4)
            .unwrap();
        // acc = 127 * v at 2^-(7+4); shift 7 returns to 2^-4
        let rp = RequantParams::new(1, 7).unwrap();
        let m1 = matmul_m2(&a, &v, &rp, 4, dims).unwrap();
        for s in 0..5 {
            for h in 0..2 {
                for p in 0..3 {
                    let got = i32::from(m1.index(&[s, h, p]).unwrap());
                    let want = i32::from(v.index(&[h, p, s]).unwrap());
                    assert!((got - want).abs() <= 1, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn scalar_value_gemm() {
        let dims = AttnDims::new(1, 1, 1, 1).unwrap();
        let a = QuantTensor::from_data(vec![127], &[1, 1, 1], Layout::Shs, 7).unwrap();
        let v = QuantTensor::from_data(vec![-50], &[1, 1, 1], Layout::Hps, 3).unwrap();
        let m1 = matmul_m2(&a, &v, &RequantParams::new(1, 7).unwrap(), 3, dims).unwrap();
        // -6350 / 128 = -49.6 -> -50
        assert_eq!(m1.data(), &[-50]);
    }

    #[test]
    fn fwsa_zero_input_uniform() {
        let dims = AttnDims::new(3, 4, 2, 2).unwrap();
        let x = QuantTensor::zeros(&[3, 4], Layout::Se, 5).unwrap();
        let w = QuantTensor::from_data(vec![17; 32], &[2, 4, 4], Layout::Hee, 6).unwrap();
        let fw = FwsaWeights {
            w_star: w,
            rp: RequantParams::new(1, 6).unwrap(),
            m2_exp: 5,
            score: ScoreScale::for_attention(5, 5, 2),
        };
        let a = fwsa_fused(&x, &fw, dims).unwrap();
        assert!(a.data().iter().all(|&v| v == 42));
    }

    #[test]
    fn shape_mismatch_reported() {
        let dims = AttnDims::new(4, 8, 8, 2).unwrap();
        let q = hsp(2, 4, 8, |_| 0);
        let k = hsp(2, 3, 8, |_| 0);
        assert!(matches!(
            matmul_softmax(&q, &k, &ScoreScale::for_attention(5, 5, 8), dims),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
