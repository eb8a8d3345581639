//! Linear projections: input-reuse (IRL), weight-reuse (WRL) and the
//! output projection.

use std::ops::Range;

use super::{blocked_dots, rows, BlockOrder};
use crate::error::{Error, Result};
use crate::quant::requantize;
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

/// Quantized weights of one linear layer plus its requantization.
///
/// Projection weights are `(H, P, E)` in [`Layout::Hpe`]; output-projection
/// weights are `(E, H*P)` in [`Layout::Ehp`]. Either way each output
/// feature owns one contiguous row over the reduction axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearWeights {
    pub w: QuantTensor,
    pub rp: RequantParams,
    pub out_exp: i32,
}

/// Extents of a (possibly head-batched) linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LinearShape {
    pub heads: usize,
    pub rows: usize,
    pub feats: usize,
    pub red: usize,
}

/// Output axis order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OutOrder {
    /// `[h][row][feat]` (IRL, output projection with one head).
    RowMajor,
    /// `[h][feat][row]` (WRL).
    FeatMajor,
}

/// `out[h][r][f] = requant(sum_k x[r][k] * w[h][f][k] + bias[h*feats + f])`
/// for `h` in `heads`, `r` in `row_range`. Writes only those outputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_core(
    x: &[i8],
    w: &[i8],
    rp: &RequantParams,
    shape: LinearShape,
    order: OutOrder,
    heads: Range<usize>,
    row_range: Range<usize>,
    out: &mut [i8],
) {
    let LinearShape {
        rows: n_rows,
        feats,
        red,
        ..
    } = shape;
    let x_rows: Vec<&[i8]> = rows(x, red)[row_range.clone()].to_vec();
    let r0 = row_range.start;
    for h in heads {
        let w_rows = rows(&w[h * feats * red..(h + 1) * feats * red], red);
        match order {
            // H -> S -> P -> E
            OutOrder::RowMajor => {
                let base = h * n_rows * feats;
                blocked_dots(&x_rows, &w_rows, BlockOrder::QuadsOuter, |r, f, acc| {
                    let acc = acc + rp.bias_at(h * feats + f);
                    out[base + (r0 + r) * feats + f] = requantize(acc, rp);
                });
            }
            // H -> P -> S -> E
            OutOrder::FeatMajor => {
                let base = h * feats * n_rows;
                blocked_dots(&x_rows, &w_rows, BlockOrder::PairsOuter, |r, f, acc| {
                    let acc = acc + rp.bias_at(h * feats + f);
                    out[base + f * n_rows + r0 + r] = requantize(acc, rp);
                });
            }
        }
    }
}

fn check_projection(x: &QuantTensor, w: &LinearWeights, dims: AttnDims, op: &'static str) -> Result<()> {
    let mismatch = |detail: String| Err(Error::ShapeMismatch { op, detail });
    if x.layout() != Layout::Se || x.shape() != [dims.s, dims.e] {
        return mismatch(format!("X is {:?} {}, expected SE [{}, {}]", x.shape(), x.layout(), dims.s, dims.e));
    }
    if w.w.layout() != Layout::Hpe || w.w.shape() != [dims.h, dims.p, dims.e] {
        return mismatch(format!(
            "W is {:?} {}, expected HPE [{}, {}, {}]",
            w.w.shape(),
            w.w.layout(),
            dims.h,
            dims.p,
            dims.e
        ));
    }
    w.rp.check_bias_len(dims.h * dims.p, op)
}

fn projection(x: &QuantTensor, w: &LinearWeights, dims: AttnDims, order: OutOrder) -> Result<QuantTensor> {
    let (layout, shape) = match order {
        OutOrder::RowMajor => (Layout::Hsp, [dims.h, dims.s, dims.p]),
        OutOrder::FeatMajor => (Layout::Hps, [dims.h, dims.p, dims.s]),
    };
    let mut out = QuantTensor::zeros(&shape, layout, w.out_exp)?;
    let lshape = LinearShape {
        heads: dims.h,
        rows: dims.s,
        feats: dims.p,
        red: dims.e,
    };
    linear_core(x.data(), w.w.data(), &w.rp, lshape, order, 0..dims.h, 0..dims.s, out.data_mut());
    Ok(out)
}

/// Input-reuse projection (used for Q and K): loop order `H -> S -> P -> E`,
/// output `HSP` so the score GEMM reads query and key rows contiguously.
pub fn linear_irl(x: &QuantTensor, w: &LinearWeights, dims: AttnDims) -> Result<QuantTensor> {
    check_projection(x, w, dims, "linear_irl")?;
    projection(x, w, dims, OutOrder::RowMajor)
}

/// Weight-reuse projection (used for V): loop order `H -> P -> S -> E`,
/// output `HPS`, i.e. the per-head transpose of [`linear_irl`].
pub fn linear_wrl(x: &QuantTensor, w: &LinearWeights, dims: AttnDims) -> Result<QuantTensor> {
    check_projection(x, w, dims, "linear_wrl")?;
    projection(x, w, dims, OutOrder::FeatMajor)
}

/// Output projection: loop order `S -> E -> (H*P)`, reading `M1` rows as
/// the concatenated head outputs.
pub fn linear_out(m1: &QuantTensor, w: &LinearWeights, dims: AttnDims) -> Result<QuantTensor> {
    let op = "linear_out";
    if m1.layout() != Layout::Shp || m1.shape() != [dims.s, dims.h, dims.p] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("M1 is {:?} {}, expected SHP [{}, {}, {}]", m1.shape(), m1.layout(), dims.s, dims.h, dims.p),
        });
    }
    if w.w.layout() != Layout::Ehp || w.w.shape() != [dims.e, dims.hp()] {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("W_out is {:?} {}, expected EHP [{}, {}]", w.w.shape(), w.w.layout(), dims.e, dims.hp()),
        });
    }
    w.rp.check_bias_len(dims.e, op)?;
    let mut out = QuantTensor::zeros(&[dims.s, dims.e], Layout::Se, w.out_exp)?;
    let lshape = LinearShape {
        heads: 1,
        rows: dims.s,
        feats: dims.e,
        red: dims.hp(),
    };
    linear_core(m1.data(), w.w.data(), &w.rp, lshape, OutOrder::RowMajor, 0..1, 0..dims.s, out.data_mut());
    Ok(out)
}
