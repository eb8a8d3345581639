//! The quantized attention block: weights, requantization and flavor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{FwsaWeights, LinearWeights};
use crate::quant::ScoreScale;
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flavor {
    /// Classical multi-head self-attention.
    Mhsa,
    /// Fused-weight self-attention.
    Fwsa,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Mhsa => "MHSA",
            Flavor::Fwsa => "FWSA",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mhsa" => Ok(Flavor::Mhsa),
            "fwsa" => Ok(Flavor::Fwsa),
            _ => Err(Error::InvalidValue(format!("unknown attention flavor `{s}`"))),
        }
    }
}

/// How the attention map is produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorePath {
    Mhsa {
        q: LinearWeights,
        k: LinearWeights,
        score: ScoreScale,
    },
    Fwsa(FwsaWeights),
}

/// One quantized attention block `X -> OUT`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionBlock {
    pub dims: AttnDims,
    pub x_exp: i32,
    pub scores: ScorePath,
    pub v: LinearWeights,
    /// Requantization of `A V` (accumulator at `2^-(7 + v_exp)`).
    pub m1_rp: RequantParams,
    pub m1_exp: i32,
    pub out: LinearWeights,
}

impl AttentionBlock {
    pub fn flavor(&self) -> Flavor {
        match self.scores {
            ScorePath::Mhsa { .. } => Flavor::Mhsa,
            ScorePath::Fwsa(_) => Flavor::Fwsa,
        }
    }

    /// Check every tensor against the block dimensions.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let check = |name: &str, t: &QuantTensor, layout: Layout, shape: &[usize]| {
            if t.layout() != layout || t.shape() != shape {
                Err(Error::Validation(format!(
                    "{name}: got {} {:?}, expected {layout} {shape:?}",
                    t.layout(),
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        let bias = |name: &str, rp: &RequantParams, n: usize| {
            if rp.bias.is_empty() || rp.bias.len() == n {
                Ok(())
            } else {
                Err(Error::Validation(format!("{name}: bias length {} != {n}", rp.bias.len())))
            }
        };
        match &self.scores {
            ScorePath::Mhsa { q, k, .. } => {
                check("wq", &q.w, Layout::Hpe, &[d.h, d.p, d.e])?;
                check("wk", &k.w, Layout::Hpe, &[d.h, d.p, d.e])?;
                bias("wq", &q.rp, d.hp())?;
                bias("wk", &k.rp, d.hp())?;
            }
            ScorePath::Fwsa(fw) => {
                check("wstar", &fw.w_star, Layout::Hee, &[d.h, d.e, d.e])?;
                if !fw.rp.bias.is_empty() {
                    return Err(Error::Validation("wstar: fused path carries no bias".into()));
                }
            }
        }
        check("wv", &self.v.w, Layout::Hpe, &[d.h, d.p, d.e])?;
        bias("wv", &self.v.rp, d.hp())?;
        check("wo", &self.out.w, Layout::Ehp, &[d.e, d.hp()])?;
        bias("wo", &self.out.rp, d.e)?;
        Ok(())
    }

    /// int8 weight bytes.
    pub fn weight_bytes(&self) -> usize {
        let scores = match &self.scores {
            ScorePath::Mhsa { q, k, .. } => q.w.bytes() + k.w.bytes(),
            ScorePath::Fwsa(fw) => fw.w_star.bytes(),
        };
        scores + self.v.w.bytes() + self.out.w.bytes()
    }

    /// 16-bit bias bytes.
    pub fn bias_bytes(&self) -> usize {
        let scores = match &self.scores {
            ScorePath::Mhsa { q, k, .. } => q.rp.bias.len() + k.rp.bias.len(),
            ScorePath::Fwsa(_) => 0,
        };
        2 * (scores + self.v.rp.bias.len() + self.out.rp.bias.len())
    }
}
