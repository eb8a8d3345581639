//! Offline Q/K weight fusion and the op/parameter cost model comparing
//! classical and fused-weight attention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::quantize_slice;
use crate::tensor::{AttnDims, Layout, QuantTensor};

/// `W*[h] = Wq[h] Wk[h]^T` for `(H, E, P)` float weights, returned as
/// `(H, E, E)` in logical order `[h][e][e']`.
pub fn fuse_weights(wq: &[f64], wk: &[f64], dims: AttnDims) -> Result<Vec<f64>> {
    let AttnDims { e, p, h, .. } = dims;
    let want = h * e * p;
    if wq.len() != want || wk.len() != want {
        return Err(Error::ShapeMismatch {
            op: "fuse_weights",
            detail: format!("Wq {} / Wk {} elements, expected {want}", wq.len(), wk.len()),
        });
    }
    let mut out = vec![0.0; h * e * e];
    for hh in 0..h {
        for i in 0..e {
            let qi = &wq[(hh * e + i) * p..(hh * e + i + 1) * p];
            for j in 0..e {
                let kj = &wk[(hh * e + j) * p..(hh * e + j + 1) * p];
                out[(hh * e + i) * e + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(out)
}

/// Quantize a logical `(H, E, E)` fused weight into the kernel layout
/// [`Layout::Hee`] (`[h][e_out][e_in]`, i.e. transposed per head).
pub fn quantize_wstar(wstar: &[f64], dims: AttnDims, scale_exp: i32) -> Result<QuantTensor> {
    let AttnDims { e, h, .. } = dims;
    if wstar.len() != h * e * e {
        return Err(Error::ShapeMismatch {
            op: "quantize_wstar",
            detail: format!("W* has {} elements, expected {}", wstar.len(), h * e * e),
        });
    }
    let mut t = vec![0.0; h * e * e];
    for hh in 0..h {
        for g in 0..e {
            for f in 0..e {
                t[(hh * e + f) * e + g] = wstar[(hh * e + g) * e + f];
            }
        }
    }
    QuantTensor::from_data(quantize_slice(&t, scale_exp)?, &[h, e, e], Layout::Hee, scale_exp)
}

fn u(v: usize) -> u64 {
    v as u64
}

/// MACs of the score path: Q/K projections plus `Q K^T`, against the
/// fused pair `X W*` and `(X W*) X^T`.
pub fn count_core_ops(dims: AttnDims) -> (u64, u64) {
    let (s, e, p, h) = (u(dims.s), u(dims.e), u(dims.p), u(dims.h));
    (2 * h * s * p * e + h * s * s * p, h * s * e * e + h * s * s * e)
}

/// MACs of the whole block (score path, V projection, `A V`, output
/// projection).
pub fn count_block_ops(dims: AttnDims) -> (u64, u64) {
    let (s, e, p, h) = (u(dims.s), u(dims.e), u(dims.p), u(dims.h));
    let mhsa = 2 * s * p * h * (2 * e + s);
    let fwsa = h * s * e * e + h * s * s * e + 2 * s * p * h * e + h * s * s * p;
    (mhsa, fwsa)
}

/// Weight counts `(core MHSA, core FWSA, block MHSA, block FWSA)`, biases
/// excluded.
pub fn count_params(dims: AttnDims) -> (u64, u64, u64, u64) {
    let (e, p, h) = (u(dims.e), u(dims.p), u(dims.h));
    let core_mhsa = 2 * h * p * e;
    let core_fwsa = h * e * e;
    (core_mhsa, core_fwsa, core_mhsa + 2 * h * e * p, core_fwsa + 2 * h * e * p)
}

/// Bias counts `(MHSA, FWSA)`: the fused path drops the Q and K biases.
pub fn count_bias_params(dims: AttnDims) -> (u64, u64) {
    let (e, hp) = (u(dims.e), u(dims.hp()));
    (3 * hp + e, hp + e)
}

/// Op threshold on `E`: fusion saves MACs iff `E` is below it.
pub fn op_threshold(s: usize, p: usize) -> f64 {
    let (s, p) = (s as f64, p as f64);
    p - s / 2.0 + (4.0 * p * p + s * s).sqrt() / 2.0
}

/// `(op_flag, param_flag)`: whether fusion lowers the score-path MACs and
/// parameters.
pub fn fwsa_beneficial(dims: AttnDims) -> (bool, bool) {
    ((dims.e as f64) < op_threshold(dims.s, dims.p), dims.e < 2 * dims.p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnCostReport {
    pub dims: AttnDims,
    /// Score-path MACs.
    pub macs_mhsa: u64,
    pub macs_fwsa: u64,
    /// Score-path weights.
    pub params_mhsa: u64,
    pub params_fwsa: u64,
    pub block_macs_mhsa: u64,
    pub block_macs_fwsa: u64,
    pub block_params_mhsa: u64,
    pub block_params_fwsa: u64,
    pub bias_params_mhsa: u64,
    pub bias_params_fwsa: u64,
    pub op_beneficial: bool,
    pub param_beneficial: bool,
}

impl AttnCostReport {
    pub fn new(dims: AttnDims) -> Self {
        let (macs_mhsa, macs_fwsa) = count_core_ops(dims);
        let (block_macs_mhsa, block_macs_fwsa) = count_block_ops(dims);
        let (params_mhsa, params_fwsa, block_params_mhsa, block_params_fwsa) = count_params(dims);
        let (bias_params_mhsa, bias_params_fwsa) = count_bias_params(dims);
        let (op_beneficial, param_beneficial) = fwsa_beneficial(dims);
        AttnCostReport {
            dims,
            macs_mhsa,
            macs_fwsa,
            params_mhsa,
            params_fwsa,
            block_macs_mhsa,
            block_macs_fwsa,
            block_params_mhsa,
            block_params_fwsa,
            bias_params_mhsa,
            bias_params_fwsa,
            op_beneficial,
            param_beneficial,
        }
    }

    /// Relative block-MAC change `1 - fwsa/mhsa`; negative means fusion costs more.
    pub fn block_mac_reduction(&self) -> f64 {
        1.0 - self.block_macs_fwsa as f64 / self.block_macs_mhsa as f64
    }

    pub fn block_param_reduction(&self) -> f64 {
        1.0 - self.block_params_fwsa as f64 / self.block_params_mhsa as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(s: usize, e: usize, p: usize, h: usize) -> AttnDims {
        AttnDims::new(s, e, p, h).unwrap()
    }

    #[test]
    fn identity_fuses_to_identity() {
        let d = dims(1, 3, 3, 1);
        let id: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        assert_eq!(fuse_weights(&id, &id, d).unwrap(), id);
    }

    #[test]
    fn unit_dims_counts() {
        assert_eq!(count_core_ops(dims(1, 1, 1, 1)), (3, 2));
    }

    #[test]
    fn eeg_and_tr_counts() {
        assert_eq!(count_core_ops(AttnDims::EEG), (3_006_720, 2_343_168));
        assert_eq!(count_block_ops(AttnDims::EEG), (6_013_440, 5_349_888));
        assert_eq!(count_block_ops(AttnDims::TR), (176_640, 135_680));
        let (_, _, bm, bf) = count_params(AttnDims::EEG);
        assert_eq!((bm, bf), (32_768, 24_576));
    }

    #[test]
    fn crossovers() {
        let at = |e| fwsa_beneficial(dims(32, e, 32, 8));
        assert!(at(51).0 && !at(52).0);
        assert!(at(63).1 && !at(64).1);
    }

    #[test]
    fn wstar_layout_is_transposed() {
        let d = dims(1, 2, 1, 1);
        let w = quantize_wstar(&[1.0, 2.0, 3.0, 4.0], d, 0).unwrap();
        assert_eq!(w.data(), &[1, 3, 2, 4]);
    }
}
