//! Quantized tensors, layouts and attention-shape bookkeeping.
//!
//! Every buffer in the crate is a dense row-major array of `i8`. The
//! [`Layout`] tag names the axis order, so the same logical tensor can be
//! stored head-major (`Hsp`), transposed per head (`Hps`) or with heads
//! interleaved inside the sequence axis (`Shs`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis order of a dense row-major buffer.
///
/// `S` sequence, `E` embedding, `P` projection, `H` head. `Shs` is the
/// attention map with heads interleaved between the query and key axes.
/// The three weight layouts keep the reduction axis innermost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Se,
    Hsp,
    Hps,
    Shs,
    /// Attention map stored one `S x S` block per head.
    Hss,
    /// Head outputs concatenated per row: `(S, H, P)`, i.e. `(S, H*P)`.
    Shp,
    /// Fused-weight intermediate `X * W*`, head-major.
    Hse,
    /// Projection weights `(H, P, E)`: one `E`-contiguous row per output feature.
    Hpe,
    /// Output-projection weights `(E, H*P)`.
    Ehp,
    /// Fused weights `(H, E_out, E_in)`.
    Hee,
}

impl Layout {
    pub const ALL: [Layout; 10] = [
        Layout::Se,
        Layout::Hsp,
        Layout::Hps,
        Layout::Shs,
        Layout::Hss,
        Layout::Shp,
        Layout::Hse,
        Layout::Hpe,
        Layout::Ehp,
        Layout::Hee,
    ];

    pub fn rank(self) -> usize {
        match self {
            Layout::Se | Layout::Ehp => 2,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Se => "SE",
            Layout::Hsp => "HSP",
            Layout::Hps => "HPS",
            Layout::Shs => "SHS",
            Layout::Hss => "HSS",
            Layout::Shp => "SHP",
            Layout::Hse => "HSE",
            Layout::Hpe => "HPE",
            Layout::Ehp => "EHP",
            Layout::Hee => "HEE",
        }
    }

    /// Position of the head axis, if the layout has one.
    pub fn head_axis(self) -> Option<usize> {
        match self {
            Layout::Hsp | Layout::Hps | Layout::Hss | Layout::Hse | Layout::Hpe | Layout::Hee => {
                Some(0)
            }
            Layout::Shs | Layout::Shp => Some(1),
            Layout::Se | Layout::Ehp => None,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Layout::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidValue(format!("unknown layout `{s}`")))
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        st[i] = st[i + 1] * shape[i + 1];
    }
    st
}

/// An int8 tensor with a power-of-two scale: real value = `q * 2^-scale_exp`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTensor {
    data: Vec<i8>,
    shape: Vec<usize>,
    layout: Layout,
    scale_exp: i32,
}

impl QuantTensor {
    /// Zero-initialized tensor.
    pub fn zeros(shape: &[usize], layout: Layout, scale_exp: i32) -> Result<Self> {
        check_shape(shape, layout)?;
        let n = shape.iter().product();
        Ok(QuantTensor {
            data: vec![0; n],
            shape: shape.to_vec(),
            layout,
            scale_exp,
        })
    }

    pub fn from_data(data: Vec<i8>, shape: &[usize], layout: Layout, scale_exp: i32) -> Result<Self> {
        check_shape(shape, layout)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("data length {} != element count {n}", data.len()),
            });
        }
        Ok(QuantTensor {
            data,
            shape: shape.to_vec(),
            layout,
            scale_exp,
        })
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Storage size in bytes (one byte per element).
    pub fn bytes(&self) -> usize {
        self.data.len()
    }

    /// Row-major offset of `coords` in this tensor's axis order.
    pub fn offset(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.shape.len()
            || coords.iter().zip(&self.shape).any(|(c, n)| c >= n)
        {
            return Err(Error::OutOfBounds {
                coords: coords.to_vec(),
                shape: self.shape.clone(),
            });
        }
        let mut off = 0;
        let mut stride = 1;
        for (c, n) in coords.iter().zip(&self.shape).rev() {
            off += c * stride;
            stride *= n;
        }
        Ok(off)
    }

    pub fn index(&self, coords: &[usize]) -> Result<i8> {
        Ok(self.data[self.offset(coords)?])
    }

    pub fn set(&mut self, coords: &[usize], v: i8) -> Result<()> {
        let off = self.offset(coords)?;
        self.data[off] = v;
        Ok(())
    }

    pub fn dequantize(&self) -> Vec<f64> {
        let scale = (2f64).powi(-self.scale_exp);
        self.data.iter().map(|&q| f64::from(q) * scale).collect()
    }
}

fn check_shape(shape: &[usize], layout: Layout) -> Result<()> {
    if shape.len() != layout.rank() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("layout {layout} expects {} axes", layout.rank()),
        });
    }
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

/// The four attention hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttnDims {
    /// Sequence length.
    pub s: usize,
    /// Embedding dimension.
    pub e: usize,
    /// Projection dimension per head.
    pub p: usize,
    /// Number of heads.
    pub h: usize,
}

impl AttnDims {
    pub fn new(s: usize, e: usize, p: usize, h: usize) -> Result<Self> {
        if s == 0 || e == 0 || p == 0 || h == 0 {
            return Err(Error::InvalidShape {
                shape: vec![s, e, p, h],
                reason: "S, E, P, H must all be >= 1".into(),
            });
        }
        Ok(AttnDims { s, e, p, h })
    }

    /// EEGFormer attention block.
    pub const EEG: AttnDims = AttnDims { s: 81, e: 32, p: 32, h: 8 };
    /// ECGFormer attention block.
    pub const ECG: AttnDims = AttnDims { s: 66, e: 16, p: 2, h: 8 };
    /// TR-Former attention block.
    pub const TR: AttnDims = AttnDims { s: 5, e: 32, p: 32, h: 8 };

    pub fn hp(&self) -> usize {
        self.h * self.p
    }

    pub fn bytes(&self, role: TensorRole) -> usize {
        tensor_bytes(*self, role)
    }
}

impl fmt::Display for AttnDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S={} E={} P={} H={}", self.s, self.e, self.p, self.h)
    }
}

/// Named tensors of the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TensorRole {
    X,
    Q,
    K,
    V,
    A,
    M1,
    /// Fused-weight intermediate `X * W*`.
    M2,
    Out,
    WQkvEach,
    WOut,
    WStar,
}

impl TensorRole {
    pub fn name(self) -> &'static str {
        match self {
            TensorRole::X => "X",
            TensorRole::Q => "Q",
            TensorRole::K => "K",
            TensorRole::V => "V",
            TensorRole::A => "A",
            TensorRole::M1 => "M1",
            TensorRole::M2 => "M2",
            TensorRole::Out => "OUT",
            TensorRole::WQkvEach => "W_qkv_each",
            TensorRole::WOut => "W_out",
            TensorRole::WStar => "W_star",
        }
    }
}

impl FromStr for TensorRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use TensorRole::*;
        [X, Q, K, V, A, M1, M2, Out, WQkvEach, WOut, WStar]
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidValue(format!("unknown tensor role `{s}`")))
    }
}

/// Exact int8 byte size of a block tensor.
pub fn tensor_bytes(dims: AttnDims, role: TensorRole) -> usize {
    let AttnDims { s, e, p, h } = dims;
    match role {
        TensorRole::X | TensorRole::Out => s * e,
        TensorRole::Q | TensorRole::K | TensorRole::V | TensorRole::M1 => h * s * p,
        TensorRole::A => h * s * s,
        TensorRole::M2 => h * s * e,
        TensorRole::WQkvEach | TensorRole::WOut => h * e * p,
        TensorRole::WStar => h * e * e,
    }
}

/// Integer reduction of an int32 accumulator to int8: `clamp((acc * eps_mul + round) >> eps_div)`.
///
/// `bias` holds one 16-bit addend per output feature for linear layers and
/// is empty otherwise. It is added to the accumulator before scaling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub eps_mul: u16,
    pub eps_div: u32,
    pub bias: Vec<i16>,
}

impl RequantParams {
    /// Output bit width; fixed.
    pub const BITS: u32 = 8;

    pub fn new(eps_mul: u16, eps_div: u32) -> Result<Self> {
        if eps_div >= 32 {
            return Err(Error::ShiftOverflow { shift: eps_div as i32 });
        }
        Ok(RequantParams {
            eps_mul,
            eps_div,
            bias: Vec::new(),
        })
    }

    pub fn with_bias(mut self, bias: Vec<i16>) -> Self {
        self.bias = bias;
        self
    }

    pub fn bias_at(&self, i: usize) -> i32 {
        self.bias.get(i).copied().map_or(0, i32::from)
    }

    pub fn check_bias_len(&self, features: usize, op: &'static str) -> Result<()> {
        if !self.bias.is_empty() && self.bias.len() != features {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("bias length {} != {features} output features", self.bias.len()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alloc_zero_tensor() {
        let t = QuantTensor::zeros(&[5, 32], Layout::Se, 7).unwrap();
        assert_eq!(t.len(), 160);
        assert!(t.data().iter().all(|&v| v == 0));
        assert_eq!(t.scale_exp(), 7);

        let t = QuantTensor::zeros(&[8, 5, 32], Layout::Hsp, 7).unwrap();
        assert_eq!(t.len(), 1280);
    }

    #[test]
    fn alloc_rejects_degenerate_shape() {
        assert!(matches!(
            QuantTensor::zeros(&[0, 4], Layout::Se, 0),
            Err(Error::InvalidShape { .. })
        ));
        assert!(QuantTensor::zeros(&[2, 2], Layout::Hsp, 0).is_err());
    }

    #[test]
    fn index_offsets() {
        let t = QuantTensor::zeros(&[8, 5, 32], Layout::Hsp, 0).unwrap();
        assert_eq!(t.offset(&[0, 0, 0]).unwrap(), 0);
        let t = QuantTensor::zeros(&[1, 2, 3], Layout::Hps, 0).unwrap();
        assert_eq!(t.offset(&[0, 1, 0]).unwrap(), 3);
        let t = QuantTensor::zeros(&[2, 2, 2], Layout::Shs, 0).unwrap();
        assert_eq!(t.offset(&[1, 0, 0]).unwrap(), 4);
        assert!(matches!(t.index(&[2, 0, 0]), Err(Error::OutOfBounds { .. })));
        assert!(t.index(&[0, 0]).is_err());
    }

    fn all_coords(shape: &[usize]) -> Vec<Vec<usize>> {
        shape.iter().fold(vec![vec![]], |acc, &n| {
            acc.into_iter()
                .flat_map(|c| {
                    (0..n).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect()
        })
    }

    #[test]
    fn offsets_are_a_bijection() {
        for layout in Layout::ALL {
            let shape = &[3, 2, 4][..layout.rank()];
            let t = QuantTensor::zeros(shape, layout, 0).unwrap();
            let mut seen = vec![false; t.len()];
            for c in all_coords(shape) {
                let off = t.offset(&c).unwrap();
                assert!(!seen[off], "{layout}: offset {off} visited twice");
                seen[off] = true;
            }
            assert!(seen.iter().all(|&v| v), "{layout}: not every offset reached");
        }
    }

    #[test]
    fn byte_accounting() {
        assert_eq!(tensor_bytes(AttnDims::ECG, TensorRole::A), 34_848);
        assert_eq!(tensor_bytes(AttnDims::EEG, TensorRole::Q), 20_736);
        let unit = AttnDims::new(1, 1, 3, 2).unwrap();
        assert_eq!(tensor_bytes(unit, TensorRole::X), 1);
        assert_eq!(tensor_bytes(AttnDims::EEG, TensorRole::WQkvEach), 8 * 32 * 32);
        assert_eq!(tensor_bytes(AttnDims::ECG, TensorRole::WStar), 8 * 16 * 16);
        assert!("W_out".parse::<TensorRole>().is_ok());
        assert!("bogus".parse::<TensorRole>().is_err());
    }

    #[test]
    fn requant_params_validate_shift() {
        assert!(RequantParams::new(1, 31).is_ok());
        assert!(RequantParams::new(1, 32).is_err());
    }

    #[test]
    fn dims_must_be_positive() {
        assert!(AttnDims::new(0, 1, 1, 1).is_err());
        assert!(AttnDims::new(1, 1, 1, 1).is_ok());
    }
}
