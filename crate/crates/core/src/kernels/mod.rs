//! Integer attention kernels.
//!
//! All kernels take int8 inputs, accumulate in int32 and requantize in the
//! innermost position, so no accumulator buffer outlives one output tile.
//! Dot products run through a 4x2 register block (four input rows against
//! two weight rows, eight live accumulators) with scalar remainder loops.

mod attention;
mod ibert;
mod linear;

pub use attention::{fwsa_fused, matmul_m2, matmul_softmax, FwsaWeights};
pub(crate) use attention::{m2_core, score_core, ScoreShape};
pub use ibert::{
    i_gelu, i_layernorm, int_softmax, IGelu, LayerNormParams, GELU_A, GELU_B, LN_NORM_BITS,
    LN_STD_GUARD_BITS, SOFTMAX_OUT_EXP, SOFTMAX_WORK_EXP,
};
pub use linear::{linear_irl, linear_out, linear_wrl, LinearWeights};
pub(crate) use linear::{linear_core, LinearShape, OutOrder};

/// Exp polynomial `a (x + b)^2 + c` on `(-ln2, 0]`.
pub use ibert::{EXP_A, EXP_B, EXP_C};

#[inline]
pub(crate) fn dot(a: &[i8], b: &[i8]) -> i32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| i32::from(x) * i32::from(y))
        .sum()
}

#[inline]
fn dot_4x2(a: [&[i8]; 4], b: [&[i8]; 2]) -> [[i32; 2]; 4] {
    let mut acc = [[0i32; 2]; 4];
    let n = b[0].len();
    for k in 0..n {
        let w0 = i32::from(b[0][k]);
        let w1 = i32::from(b[1][k]);
        for (r, row) in a.iter().enumerate() {
            let x = i32::from(row[k]);
            acc[r][0] += x * w0;
            acc[r][1] += x * w1;
        }
    }
    acc
}

/// Which operand's blocks form the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BlockOrder {
    /// Quads of `a` rows outside, pairs of `b` rows inside.
    QuadsOuter,
    /// Pairs of `b` rows outside, quads of `a` rows inside.
    PairsOuter,
}

/// `emit(i, j, dot(a[i], b[j]))` for every `i < a.len()`, `j < b.len()`,
/// computed in 4x2 register blocks.
pub(crate) fn blocked_dots<F>(a: &[&[i8]], b: &[&[i8]], order: BlockOrder, mut emit: F)
where
    F: FnMut(usize, usize, i32),
{
    let m = a.len();
    let n = b.len();
    let mq = m / 4 * 4;
    let np = n / 2 * 2;
    let block = |i: usize, j: usize, emit: &mut F| {
        let acc = dot_4x2([a[i], a[i + 1], a[i + 2], a[i + 3]], [b[j], b[j + 1]]);
        for (r, pair) in acc.iter().enumerate() {
            emit(i + r, j, pair[0]);
            emit(i + r, j + 1, pair[1]);
        }
    };
    match order {
        BlockOrder::QuadsOuter => {
            for i in (0..mq).step_by(4) {
                for j in (0..np).step_by(2) {
                    block(i, j, &mut emit);
                }
                for j in np..n {
                    for r in i..i + 4 {
                        emit(r, j, dot(a[r], b[j]));
                    }
                }
            }
        }
        BlockOrder::PairsOuter => {
            for j in (0..np).step_by(2) {
                for i in (0..mq).step_by(4) {
                    block(i, j, &mut emit);
                }
            }
            for j in np..n {
                for r in 0..mq {
                    emit(r, j, dot(a[r], b[j]));
                }
            }
        }
    }
    for i in mq..m {
        for (j, bj) in b.iter().enumerate() {
            emit(i, j, dot(a[i], bj));
        }
    }
}

pub(crate) fn rows(buf: &[i8], len: usize) -> Vec<&[i8]> {
    buf.chunks_exact(len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocked_dots_cover_every_pair_once() {
        for (m, n, k) in [(1, 1, 1), (4, 2, 3), (5, 3, 2), (7, 5, 4), (8, 4, 1), (3, 1, 6)] {
            let abuf: Vec<i8> = (0..m * k).map(|i| (i as i8).wrapping_mul(7)).collect();
            let bbuf: Vec<i8> = (0..n * k).map(|i| (i as i8).wrapping_mul(-3)).collect();
            let a = rows(&abuf, k);
            let b = rows(&bbuf, k);
            for order in [BlockOrder::QuadsOuter, BlockOrder::PairsOuter] {
                let mut seen = vec![None; m * n];
                blocked_dots(&a, &b, order, |i, j, v| {
                    assert!(seen[i * n + j].is_none());
                    seen[i * n + j] = Some(v);
                });
                for i in 0..m {
                    for j in 0..n {
                        assert_eq!(seen[i * n + j], Some(dot(a[i], b[j])));
                    }
                }
            }
        }
    }
}
