//! Model containers: a line-oriented text format holding one quantized
//! attention block, plus seeded synthetic models and platform configs.
//!
//! ```text
//! tiny-mhsa-model 1
//! flavor = mhsa
//! dims = 5 32 32 8
//! ffn = 128
//! x_exp = 5
//!
//! [wq]
//! shape = 8 32 32
//! exp = 7
//! out_exp = 4
//! requant = 1 8
//! bias = <hex, i16 little-endian>     (optional)
//! data = <hex, i8>
//! ```
//!
//! Sections: `[wq] [wk] [score]` for MHSA or `[wstar]` for FWSA, then
//! `[wv] [m1] [wo]` and an optional `[float]` section with `f64`
//! little-endian weights used by the float oracle and by fusion.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_weights, quantize_wstar};
use crate::graph::{AttentionBlock, Flavor, ScorePath};
use crate::kernels::{FwsaWeights, LinearWeights, SOFTMAX_OUT_EXP};
use crate::oracle::FloatWeights;
use crate::planner::MemConfig;
use crate::quant::{calibrate, derive_requant, quantize_slice, ScoreScale};
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

pub const MAGIC: &str = "tiny-mhsa-model 1";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub block: AttentionBlock,
    /// Width of the feed-forward layer following the block (informational).
    pub ffn: usize,
    pub float: Option<FloatWeights>,
}

// ---------------------------------------------------------------------------
// emission

fn hex_i16(v: &[i16]) -> String {
    hex::encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn hex_f64(v: &[f64]) -> String {
    hex::encode(v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>())
}

fn hex_i8(v: &[i8]) -> String {
    hex::encode(v.iter().map(|&x| x as u8).collect::<Vec<u8>>())
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
}

fn emit_linear(out: &mut String, name: &str, w: &LinearWeights) {
    let _ = writeln!(out, "\n[{name}]");
    let _ = writeln!(out, "shape = {}", shape_str(w.w.shape()));
    let _ = writeln!(out, "exp = {}", w.w.scale_exp());
    let _ = writeln!(out, "out_exp = {}", w.out_exp);
    let _ = writeln!(out, "requant = {} {}", w.rp.eps_mul, w.rp.eps_div);
    if !w.rp.bias.is_empty() {
        let _ = writeln!(out, "bias = {}", hex_i16(&w.rp.bias));
    }
    let _ = writeln!(out, "data = {}", hex_i8(w.w.data()));
}

fn emit_score(out: &mut String, s: &ScoreScale) {
    let _ = writeln!(out, "score = {} {} {}", s.eps_mul, s.eps_div, s.logit_exp);
}

impl ModelContainer {
    pub fn to_text(&self) -> String {
        let b = &self.block;
        let d = b.dims;
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC}");
        let _ = writeln!(out, "flavor = {}", b.flavor().name().to_ascii_lowercase());
        let _ = writeln!(out, "dims = {} {} {} {}", d.s, d.e, d.p, d.h);
        let _ = writeln!(out, "ffn = {}", self.ffn);
        let _ = writeln!(out, "x_exp = {}", b.x_exp);
        match &b.scores {
            ScorePath::Mhsa { q, k, score } => {
                emit_linear(&mut out, "wq", q);
                emit_linear(&mut out, "wk", k);
                let _ = writeln!(out, "\n[score]");
                emit_score(&mut out, score);
            }
            ScorePath::Fwsa(fw) => {
                let _ = writeln!(out, "\n[wstar]");
                let _ = writeln!(out, "shape = {}", shape_str(fw.w_star.shape()));
                let _ = writeln!(out, "exp = {}", fw.w_star.scale_exp());
                let _ = writeln!(out, "out_exp = {}", fw.m2_exp);
                let _ = writeln!(out, "requant = {} {}", fw.rp.eps_mul, fw.rp.eps_div);
                emit_score(&mut out, &fw.score);
                let _ = writeln!(out, "data = {}", hex_i8(fw.w_star.data()));
            }
        }
        emit_linear(&mut out, "wv", &b.v);
        let _ = writeln!(out, "\n[m1]");
        let _ = writeln!(out, "exp = {}", b.m1_exp);
        let _ = writeln!(out, "requant = {} {}", b.m1_rp.eps_mul, b.m1_rp.eps_div);
        emit_linear(&mut out, "wo", &b.out);
        if let Some(f) = &self.float {
            let _ = writeln!(out, "\n[float]");
            for (k, v) in [("wq", &f.wq), ("wk", &f.wk), ("wv", &f.wv), ("wo", &f.wo), ("bv", &f.bv), ("bo", &f.bo)] {
                let _ = writeln!(out, "{k} = {}", hex_f64(v));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Debug, Default)]
struct Section {
    name: String,
    line: usize,
    fields: Vec<(String, String, usize)>,
}

impl Section {
    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.fields.iter().find(|f| f.0 == key).map(|f| (f.1.as_str(), f.2))
    }

    fn req(&self, key: &str) -> Result<(&str, usize)> {
        self.get(key).ok_or_else(|| Error::Parse {
            line: self.line,
            field: format!("{}.{key}", self.name),
            reason: "missing".into(),
        })
    }

    fn field(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn err(&self, key: &str, line: usize, reason: impl Into<String>) -> Error {
        Error::Parse {
            line,
            field: self.field(key),
            reason: reason.into(),
        }
    }

    fn ints<T: std::str::FromStr>(&self, key: &str, n: usize) -> Result<Vec<T>> {
        let (v, line) = self.req(key)?;
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != n {
            return Err(self.err(key, line, format!("expected {n} integers, got {}", parts.len())));
        }
        parts
            .iter()
            .map(|p| p.parse::<T>().map_err(|_| self.err(key, line, format!("`{p}` is not a valid integer"))))
            .collect()
    }

    fn int<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.ints::<T>(key, 1).map(|mut v| v.remove(0))
    }

    fn shape(&self, key: &str, want: &[usize]) -> Result<()> {
        let (_, line) = self.req(key)?;
        let got: Vec<usize> = self.ints(key, want.len())?;
        if got != want {
            return Err(self.err(key, line, format!("shape {got:?} does not match dims, expected {want:?}")));
        }
        Ok(())
    }

    fn bytes(&self, key: &str) -> Result<Option<(Vec<u8>, usize)>> {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => hex::decode(v.trim())
                .map(|b| Some((b, line)))
                .map_err(|e| self.err(key, line, format!("bad hex: {e}"))),
        }
    }

    fn i8s(&self, key: &str, len: usize) -> Result<Vec<i8>> {
        let (b, line) = self.bytes(key)?.ok_or_else(|| self.err(key, self.line, "missing"))?;
        if b.len() != len {
            return Err(self.err(key, line, format!("blob has {} bytes, shape needs {len}", b.len())));
        }
        Ok(b.into_iter().map(|x| x as i8).collect())
    }

    fn i16s(&self, key: &str, len: usize) -> Result<Vec<i16>> {
        match self.bytes(key)? {
            None => Ok(Vec::new()),
            Some((b, line)) => {
                if b.len() != 2 * len {
                    return Err(self.err(key, line, format!("blob has {} bytes, expected {} (i16 x {len})", b.len(), 2 * len)));
                }
                Ok(b.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect())
            }
        }
    }

    fn f64s(&self, key: &str, len: usize, optional: bool) -> Result<Vec<f64>> {
        match self.bytes(key)? {
            None if optional => Ok(Vec::new()),
            None => Err(self.err(key, self.line, "missing")),
            Some((b, _)) if b.is_empty() && optional => Ok(Vec::new()),
            Some((b, line)) => {
                if b.len() != 8 * len {
                    return Err(self.err(key, line, format!("blob has {} bytes, expected {} (f64 x {len})", b.len(), 8 * len)));
                }
                Ok(b.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect())
            }
        }
    }

    fn requant(&self) -> Result<RequantParams> {
        let (_, line) = self.req("requant")?;
        let v: Vec<u32> = self.ints("requant", 2)?;
        let mul = u16::try_from(v[0]).map_err(|_| self.err("requant", line, "multiplier exceeds 16 bits"))?;
        RequantParams::new(mul, v[1]).map_err(|e| self.err("requant", line, e.to_string()))
    }

    fn score(&self) -> Result<ScoreScale> {
        let (_, line) = self.req("score")?;
        let v: Vec<i64> = self.ints("score", 3)?;
        let mul = u16::try_from(v[0]).map_err(|_| self.err("score", line, "multiplier exceeds 16 bits"))?;
        let div = u32::try_from(v[1])
            .ok()
            .filter(|&d| d < 32)
            .ok_or_else(|| self.err("score", line, "shift must be in 0..32"))?;
        Ok(ScoreScale {
            eps_mul: mul,
            eps_div: div,
            logit_exp: v[2] as i32,
        })
    }

    fn linear(&self, shape: &[usize], layout: Layout, bias_len: usize) -> Result<LinearWeights> {
        self.shape("shape", shape)?;
        let n: usize = shape.iter().product();
        let exp: i32 = self.int("exp")?;
        let data = self.i8s("data", n)?;
        let bias = self.i16s("bias", bias_len)?;
        Ok(LinearWeights {
            w: QuantTensor::from_data(data, shape, layout, exp)?,
            rp: self.requant()?.with_bias(bias),
            out_exp: self.int("out_exp")?,
        })
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        Some((n, l)) => {
            return Err(Error::Parse {
                line: n,
                field: "header".into(),
                reason: format!("expected `{MAGIC}`, found `{}`", l.trim()),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 0,
                field: "header".into(),
                reason: "empty document".into(),
            })
        }
    }
    let mut sections = vec![Section::default()];
    for (n, raw) in lines {
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if sections.iter().any(|s| s.name == name) {
                return Err(Error::Parse {
                    line: n,
                    field: name.into(),
                    reason: "duplicate section".into(),
                });
            }
            sections.push(Section {
                name: name.trim().into(),
                line: n,
                fields: Vec::new(),
            });
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            line: n,
            field: l.into(),
            reason: "expected `key = value`".into(),
        })?;
        let cur = sections.last_mut().expect("at least the header section");
        let key = k.trim().to_string();
        if cur.fields.iter().any(|f| f.0 == key) {
            return Err(Error::Parse {
                line: n,
                field: cur.field(&key),
                reason: "duplicate key".into(),
            });
        }
        cur.fields.push((key, v.trim().into(), n));
    }
    Ok(sections)
}

impl ModelContainer {
    pub fn parse(text: &str) -> Result<Self> {
        let sections = split_sections(text)?;
        let find = |name: &str| sections.iter().find(|s| s.name == name);
        let need = |name: &str, why: &str| {
            find(name).ok_or_else(|| Error::Validation(format!("section [{name}] is required {why}")))
        };
        let top = &sections[0];
        let (fl, fl_line) = top.req("flavor")?;
        let flavor: Flavor = fl.parse().map_err(|e: Error| top.err("flavor", fl_line, e.to_string()))?;
        let (_, dims_line) = top.req("dims")?;
        let dv: Vec<usize> = top.ints("dims", 4)?;
        let dims = AttnDims::new(dv[0], dv[1], dv[2], dv[3]).map_err(|e| top.err("dims", dims_line, e.to_string()))?;
        let AttnDims { s: _, e, p, h } = dims;
        let ffn = if top.get("ffn").is_some() { top.int("ffn")? } else { 0 };
        let x_exp: i32 = top.int("x_exp")?;
        for s in &sections[1..] {
            if !["wq", "wk", "score", "wstar", "wv", "m1", "wo", "float"].contains(&s.name.as_str()) {
                return Err(Error::Parse {
                    line: s.line,
                    field: s.name.clone(),
                    reason: "unknown section".into(),
                });
            }
        }
        let scores = match flavor {
            Flavor::Mhsa => {
                let why = "for flavor mhsa";
                let q = need("wq", why)?.linear(&[h, p, e], Layout::Hpe, h * p)?;
                let k = need("wk", why)?.linear(&[h, p, e], Layout::Hpe, h * p)?;
                let score = need("score", why)?.score()?;
                ScorePath::Mhsa { q, k, score }
            }
            Flavor::Fwsa => {
                let ws = need("wstar", "for flavor fwsa")?;
                ws.shape("shape", &[h, e, e])?;
                let exp: i32 = ws.int("exp")?;
                let data = ws.i8s("data", h * e * e)?;
                if ws.get("bias").is_some() {
                    let (_, line) = ws.req("bias")?;
                    return Err(ws.err("bias", line, "the fused path carries no bias"));
                }
                ScorePath::Fwsa(FwsaWeights {
                    w_star: QuantTensor::from_data(data, &[h, e, e], Layout::Hee, exp)?,
                    rp: ws.requant()?,
                    m2_exp: ws.int("out_exp")?,
                    score: ws.score()?,
                })
            }
        };
        let v = need("wv", "")?.linear(&[h, p, e], Layout::Hpe, h * p)?;
        let m1 = need("m1", "")?;
        let out = need("wo", "")?.linear(&[e, h * p], Layout::Ehp, e)?;
        let float = match find("float") {
            None => None,
            Some(f) => Some(FloatWeights {
                wq: f.f64s("wq", h * e * p, true)?,
                wk: f.f64s("wk", h * e * p, true)?,
                wv: f.f64s("wv", h * e * p, false)?,
                wo: f.f64s("wo", h * p * e, false)?,
                bv: f.f64s("bv", h * p, true)?,
                bo: f.f64s("bo", e, true)?,
            }),
        };
        let block = AttentionBlock {
            dims,
            x_exp,
            scores,
            v,
            m1_rp: m1.requant()?,
            m1_exp: m1.int("exp")?,
            out,
        };
        block.validate()?;
        Ok(ModelContainer { block, ffn, float })
    }
}

// ---------------------------------------------------------------------------
// calibration and synthetic models

fn exp_of(xs: &[f64]) -> Result<i32> {
    Ok(calibrate(xs)?.chosen_exp)
}

fn quant_bias(b: &[f64], acc_exp: i32) -> Vec<i16> {
    b.iter()
        .map(|&v| (v * (2f64).powi(acc_exp)).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16)
        .collect()
}

/// `(H, E, P)` float weights into kernel layout `(H, P, E)`.
fn to_hpe(w: &[f64], dims: AttnDims) -> Vec<f64> {
    let AttnDims { e, p, h, .. } = dims;
    let mut out = vec![0.0; h * p * e];
    for hh in 0..h {
        for ee in 0..e {
            for pp in 0..p {
                out[(hh * p + pp) * e + ee] = w[(hh * e + ee) * p + pp];
            }
        }
    }
    out
}

/// `(H*P, E)` float weights into kernel layout `(E, H*P)`.
fn to_ehp(w: &[f64], dims: AttnDims) -> Vec<f64> {
    let (e, hp) = (dims.e, dims.hp());
    let mut out = vec![0.0; e * hp];
    for k in 0..hp {
        for ee in 0..e {
            out[ee * hp + k] = w[k * e + ee];
        }
    }
    out
}

fn quant_linear(w: &[f64], shape: &[usize], layout: Layout, bias: &[f64], in_exp: i32, out_exp: i32) -> Result<LinearWeights> {
    let w_exp = exp_of(w)?;
    let rp = derive_requant(in_exp, w_exp, out_exp)?.with_bias(quant_bias(bias, in_exp + w_exp));
    Ok(LinearWeights {
        w: QuantTensor::from_data(quantize_slice(w, w_exp)?, shape, layout, w_exp)?,
        rp,
        out_exp,
    })
}

/// Float intermediates of the block for one input, flattened for
/// calibration.
struct FloatTrace {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    m2: Vec<f64>,
    m1: Vec<f64>,
    out: Vec<f64>,
}

fn float_trace(x: &[f64], w: &FloatWeights, wstar: Option<&[f64]>, dims: AttnDims) -> Result<FloatTrace> {
    let AttnDims { s, e, p, h } = dims;
    let proj = |wt: &[f64], b: &[f64]| {
        let mut o = vec![0.0; h * s * p];
        for hh in 0..h {
            for ss in 0..s {
                for pp in 0..p {
                    let mut acc = b.get(hh * p + pp).copied().unwrap_or(0.0);
                    for ee in 0..e {
                        acc += x[ss * e + ee] * wt[(hh * e + ee) * p + pp];
                    }
                    o[(hh * s + ss) * p + pp] = acc;
                }
            }
        }
        o
    };
    let (q, k) = if w.wq.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (proj(&w.wq, &[]), proj(&w.wk, &[]))
    };
    let v = proj(&w.wv, &w.bv);
    let mut m2 = Vec::new();
    if let Some(ws) = wstar {
        m2 = vec![0.0; h * s * e];
        for hh in 0..h {
            for i in 0..s {
                for f in 0..e {
                    m2[(hh * s + i) * e + f] = (0..e).map(|g| x[i * e + g] * ws[(hh * e + g) * e + f]).sum::<f64>();
                }
            }
        }
    }
    let a = match wstar {
        Some(ws) => crate::oracle::float_attention_map_fwsa(x, ws, dims),
        None => crate::oracle::float_attention_map_mhsa(x, &w.wq, &w.wk, dims),
    };
    let mut m1 = vec![0.0; s * h * p];
    for hh in 0..h {
        for i in 0..s {
            for pp in 0..p {
                m1[(i * h + hh) * p + pp] = (0..s).map(|j| a[(hh * s + i) * s + j] * v[(hh * s + j) * p + pp]).sum();
            }
        }
    }
    let out = match wstar {
        Some(ws) => crate::oracle::float_fwsa(x, ws, w, dims)?,
        None => crate::oracle::float_mhsa(x, w, dims)?,
    };
    Ok(FloatTrace { q, k, v, m2, m1, out })
}

/// Quantize a float block, choosing every exponent from the ranges seen on
/// the calibration inputs.
pub fn quantize_block(w: &FloatWeights, dims: AttnDims, flavor: Flavor, calib: &[Vec<f64>]) -> Result<AttentionBlock> {
    if calib.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let AttnDims { e, p, h, .. } = dims;
    let wstar = match flavor {
        Flavor::Fwsa => Some(fuse_weights(&w.wq, &w.wk, dims)?),
        Flavor::Mhsa => None,
    };
    let mut all = FloatTrace {
        q: vec![],
        k: vec![],
        v: vec![],
        m2: vec![],
        m1: vec![],
        out: vec![],
    };
    let mut xs = Vec::new();
    for x in calib {
        let t = float_trace(x, w, wstar.as_deref(), dims)?;
        xs.extend_from_slice(x);
        all.q.extend(t.q);
        all.k.extend(t.k);
        all.v.extend(t.v);
        all.m2.extend(t.m2);
        all.m1.extend(t.m1);
        all.out.extend(t.out);
    }
    let x_exp = exp_of(&xs)?;
    let scores = match &wstar {
        None => {
            let (q_exp, k_exp) = (exp_of(&all.q)?, exp_of(&all.k)?);
            ScorePath::Mhsa {
                q: quant_linear(&to_hpe(&w.wq, dims), &[h, p, e], Layout::Hpe, &[], x_exp, q_exp)?,
                k: quant_linear(&to_hpe(&w.wk, dims), &[h, p, e], Layout::Hpe, &[], x_exp, k_exp)?,
                score: ScoreScale::for_attention(q_exp, k_exp, p),
            }
        }
        Some(ws) => {
            let ws_exp = exp_of(ws)?;
            let m2_exp = exp_of(&all.m2)?;
            ScorePath::Fwsa(FwsaWeights {
                w_star: quantize_wstar(ws, dims, ws_exp)?,
                rp: derive_requant(x_exp, ws_exp, m2_exp)?,
                m2_exp,
                score: ScoreScale::for_attention(m2_exp, x_exp, p),
            })
        }
    };
    let v_exp = exp_of(&all.v)?;
    let m1_exp = exp_of(&all.m1)?;
    let out_exp = exp_of(&all.out)?;
    let v = quant_linear(&to_hpe(&w.wv, dims), &[h, p, e], Layout::Hpe, &w.bv, x_exp, v_exp)?;
    let out = quant_linear(&to_ehp(&w.wo, dims), &[e, h * p], Layout::Ehp, &w.bo, m1_exp, out_exp)?;
    let block = AttentionBlock {
        dims,
        x_exp,
        scores,
        v,
        m1_rp: derive_requant(SOFTMAX_OUT_EXP, v_exp, m1_exp)?,
        m1_exp,
        out,
    };
    block.validate()?;
    Ok(block)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Random float weights with `1/sqrt(fan_in)` scaling.
pub fn random_float_weights(dims: AttnDims, rng: &mut ChaCha8Rng) -> FloatWeights {
    let AttnDims { e, p, h, .. } = dims;
    let we = 1.0 / (e as f64).sqrt();
    let wo = 1.0 / (dims.hp() as f64).sqrt();
    FloatWeights {
        wq: uniform(rng, h * e * p, we),
        wk: uniform(rng, h * e * p, we),
        wv: uniform(rng, h * e * p, we),
        wo: uniform(rng, h * p * e, wo),
        bv: uniform(rng, h * p, 0.1),
        bo: uniform(rng, e, 0.1),
    }
}

/// Float block inputs drawn uniformly from `[-2, 2)`.
pub fn random_float_input(dims: AttnDims, rng: &mut ChaCha8Rng) -> Vec<f64> {
    uniform(rng, dims.s * dims.e, 2.0)
}

/// Number of calibration inputs used by synthetic models and fusion.
pub const CALIBRATION_INPUTS: usize = 4;

/// Seeded synthetic model with a float section.
pub fn synthetic_model(dims: AttnDims, flavor: Flavor, seed: u64) -> Result<ModelContainer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_float_weights(dims, &mut rng);
    let calib: Vec<Vec<f64>> = (0..CALIBRATION_INPUTS).map(|_| random_float_input(dims, &mut rng)).collect();
    let block = quantize_block(&w, dims, flavor, &calib)?;
    Ok(ModelContainer {
        block,
        ffn: 4 * dims.e,
        float: Some(w),
    })
}

/// Quantized block input for `seed`, drawn like the calibration inputs.
pub fn sample_input(block: &AttentionBlock, seed: u64) -> Result<(QuantTensor, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
    let xf = random_float_input(block.dims, &mut rng);
    let q = QuantTensor::from_data(quantize_slice(&xf, block.x_exp)?, &[block.dims.s, block.dims.e], Layout::Se, block.x_exp)?;
    Ok((q, xf))
}

/// Replace the Q/K path of an MHSA model with fused weights, recalibrated
/// on inputs drawn at the model's input scale.
pub fn fuse_model(model: &ModelContainer, seed: u64) -> Result<ModelContainer> {
    let f = model
        .float
        .as_ref()
        .filter(|f| !f.wq.is_empty() && !f.wk.is_empty())
        .ok_or_else(|| Error::Validation("fusion needs the float wq and wk weights".into()))?;
    let dims = model.block.dims;
    let bound = 127.0 * (2f64).powi(-model.block.x_exp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib: Vec<Vec<f64>> = (0..CALIBRATION_INPUTS).map(|_| uniform(&mut rng, dims.s * dims.e, bound)).collect();
    let block = quantize_block(f, dims, Flavor::Fwsa, &calib)?;
    Ok(ModelContainer {
        block,
        ffn: model.ffn,
        float: model.float.clone(),
    })
}

// ---------------------------------------------------------------------------
// platform

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlatformConfig {
    pub mem: MemConfig,
    pub simd_width: usize,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            mem: MemConfig::GAP9,
            simd_width: 4,
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

impl PlatformConfig {
    /// `key = value` lines; unspecified keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = PlatformConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() || l.starts_with('#') {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
                line,
                field: l.into(),
                reason: "expected `key = value`".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            let bad = |reason: &str| Error::Parse {
                line,
                field: k.into(),
                reason: reason.into(),
            };
            let num = || v.parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
            let flag = || parse_bool(v).ok_or_else(|| bad("expected true or false"));
            match k {
                "l1_bytes" => c.mem.l1_bytes = num()?,
                "l2_bytes" => c.mem.l2_bytes = num()?,
                "cores" => c.mem.cores = num()?,
                "simd_width" => c.simd_width = num()?,
                "weights_resident" => c.mem.weights_resident = flag()?,
                "residual_live" => c.mem.residual_live = flag()?,
                "count_biases" => c.mem.count_biases = flag()?,
                _ => return Err(bad("unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.mem.validate()?;
        if self.simd_width == 0 {
            return Err(Error::InvalidConfig("simd_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Apply `weights_resident=BOOL,residual_live=BOOL,...` overrides.
    pub fn apply_policy(&mut self, spec: &str) -> Result<()> {
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::InvalidValue(format!("policy `{item}` is not key=value")))?;
            let b = parse_bool(v.trim()).ok_or_else(|| Error::InvalidValue(format!("policy `{item}`: expected true or false")))?;
            match k.trim() {
                "weights_resident" => self.mem.weights_resident = b,
                "residual_live" => self.mem.residual_live = b,
                "count_biases" => self.mem.count_biases = b,
                other => return Err(Error::InvalidValue(format!("unknown policy `{other}`"))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_flavors() {
        for flavor in [Flavor::Mhsa, Flavor::Fwsa] {
            let m = synthetic_model(AttnDims::new(5, 6, 3, 2).unwrap(), flavor, 7).unwrap();
            let back = ModelContainer::parse(&m.to_text()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn blob_length_error_names_field() {
        let m = synthetic_model(AttnDims::new(3, 4, 2, 1).unwrap(), Flavor::Mhsa, 1).unwrap();
        let text = m.to_text();
        let broken: String = text
            .lines()
            .map(|l| if l.starts_with("data = ") && l.len() > 9 { l[..l.len() - 2].to_string() } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        match ModelContainer::parse(&broken) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "wq.data"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fwsa_without_wstar_rejected() {
        let m = synthetic_model(AttnDims::new(3, 4, 2, 1).unwrap(), Flavor::Mhsa, 1).unwrap();
        let text = m.to_text().replace("flavor = mhsa", "flavor = fwsa");
        assert!(matches!(ModelContainer::parse(&text), Err(Error::Validation(_))));
    }

    #[test]
    fn platform_parse() {
        let p = PlatformConfig::parse("l1_bytes = 8000\n# c\nresidual_live = false\n").unwrap();
        assert_eq!(p.mem.l1_bytes, 8000);
        assert!(!p.mem.residual_live);
        assert!(PlatformConfig::parse("l1_bytes = 0").is_err());
        assert!(matches!(PlatformConfig::parse("cores = x"), Err(Error::Parse { line: 1, .. })));
    }
}
