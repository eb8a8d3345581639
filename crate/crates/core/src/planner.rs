//! Layer-wise (LWT) and depth-first (DFT) tiling plans over a two-level
//! memory (small L1 scratchpad, larger L2), with L2 liveness timelines.
//!
//! LWT tiles every layer on its own and materializes each layer output in
//! L2. DFT runs `Q K^T`, the softmax and `A V` together per head on tiles
//! of `x` query rows, so the attention map never leaves L1.
//!
//! Byte counts are int8 elements. Reported kilobytes are 1,000 bytes.

use std::fmt::{self, Write as _};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Flavor;
use crate::tensor::AttnDims;

/// Capacities and allocator policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemConfig {
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub cores: usize,
    /// All weights occupy L2 for the whole block.
    pub weights_resident: bool,
    /// The block input stays live until the end (residual connection).
    pub residual_live: bool,
    /// Count 16-bit biases in L1 tiles and L2 weight buffers.
    pub count_biases: bool,
}

impl MemConfig {
    /// 128 KB L1, 1.5 MB L2, 8 cores, calibrated policy.
    pub const GAP9: MemConfig = MemConfig {
        l1_bytes: 128_000,
        l2_bytes: 1_500_000,
        cores: 8,
        weights_resident: true,
        residual_live: true,
        count_biases: false,
    };

    pub fn new(l1_bytes: usize, l2_bytes: usize, cores: usize) -> Result<Self> {
        let cfg = MemConfig {
            l1_bytes,
            l2_bytes,
            cores,
            ..MemConfig::GAP9
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same policies with another L1 size.
    pub fn with_l1(self, l1_bytes: usize) -> Result<Self> {
        MemConfig::new(l1_bytes, self.l2_bytes, self.cores).map(|c| MemConfig {
            l1_bytes,
            l2_bytes: c.l2_bytes,
            cores: c.cores,
            ..self
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.l1_bytes == 0 {
            return Err(Error::InvalidConfig("l1_bytes must be positive".into()));
        }
        if self.l1_bytes >= self.l2_bytes {
            return Err(Error::InvalidConfig(format!(
                "l1_bytes ({}) must be smaller than l2_bytes ({})",
                self.l1_bytes, self.l2_bytes
            )));
        }
        if self.cores == 0 {
            return Err(Error::InvalidConfig("cores must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Lwt,
    Dft,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lwt => "lwt",
            Mode::Dft => "dft",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Requested mode, including automatic selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeRequest {
    Lwt,
    Dft,
    Auto,
}

impl FromStr for ModeRequest {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lwt" => Ok(ModeRequest::Lwt),
            "dft" => Ok(ModeRequest::Dft),
            "auto" => Ok(ModeRequest::Auto),
            _ => Err(Error::InvalidValue(format!("unknown tiling mode `{s}` (lwt|dft|auto)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KernelId {
    LinearQ,
    LinearK,
    LinearV,
    Gemm1Softmax,
    Gemm2,
    LinearOut,
    Fwsa,
    /// One head of `Q K^T -> softmax -> A V`, tiled over query rows.
    DftHead,
    /// One head of `X W* X^T -> softmax -> A V`, tiled over query rows.
    DftFwsaHead,
}

impl KernelId {
    pub const ALL: [KernelId; 9] = [
        KernelId::LinearQ,
        KernelId::LinearK,
        KernelId::LinearV,
        KernelId::Gemm1Softmax,
        KernelId::Gemm2,
        KernelId::LinearOut,
        KernelId::Fwsa,
        KernelId::DftHead,
        KernelId::DftFwsaHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelId::LinearQ => "linear_q",
            KernelId::LinearK => "linear_k",
            KernelId::LinearV => "linear_v",
            KernelId::Gemm1Softmax => "gemm1_softmax",
            KernelId::Gemm2 => "gemm2",
            KernelId::LinearOut => "linear_out",
            KernelId::Fwsa => "fwsa",
            KernelId::DftHead => "dft_head",
            KernelId::DftFwsaHead => "dft_fwsa_head",
        }
    }

    fn is_dft(self) -> bool {
        matches!(self, KernelId::DftHead | KernelId::DftFwsaHead)
    }
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// L2 buffers. Per-head buffers are used by depth-first plans so a head's
/// slices can be released as soon as that head is done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BufName {
    X,
    Q,
    K,
    V,
    A,
    M1,
    Out,
    QHead(usize),
    KHead(usize),
    VHead(usize),
    M1Head(usize),
    WQ,
    WK,
    WV,
    WOut,
    WStar,
}

impl BufName {
    pub fn is_weight(self) -> bool {
        matches!(self, BufName::WQ | BufName::WK | BufName::WV | BufName::WOut | BufName::WStar)
    }
}

impl fmt::Display for BufName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BufName::QHead(h) => write!(f, "Q[{h}]"),
            BufName::KHead(h) => write!(f, "K[{h}]"),
            BufName::VHead(h) => write!(f, "V[{h}]"),
            BufName::M1Head(h) => write!(f, "M1[{h}]"),
            other => write!(f, "{other:?}"),
        }
    }
}

pub type BufId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buffer {
    pub name: BufName,
    pub bytes: usize,
    /// First step during which the buffer occupies L2.
    pub alloc_step: usize,
    /// Last step during which the buffer occupies L2.
    pub free_step: usize,
}

/// Tile extents of one step; remainder tiles may be smaller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileSpec {
    pub heads: usize,
    pub feats: usize,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub kernel: KernelId,
    /// Head processed by a depth-first step.
    pub head: Option<usize>,
    pub tile: TileSpec,
    pub inputs: Vec<BufId>,
    pub outputs: Vec<BufId>,
    /// Buffers whose L2 lifetime starts at this step.
    pub allocs: Vec<BufId>,
    /// Buffers released after this step.
    pub frees: Vec<BufId>,
    /// L2 -> L1 bytes.
    pub bytes_in: usize,
    /// L1 -> L2 bytes.
    pub bytes_out: usize,
    /// Planned L1 working set.
    pub l1_bytes: usize,
    pub macs: u64,
    pub softmax_elems: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub mode: Mode,
    pub flavor: Flavor,
    pub dims: AttnDims,
    pub cfg: MemConfig,
    /// Query rows per depth-first tile.
    pub dft_x: Option<usize>,
    pub buffers: Vec<Buffer>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryTimeline {
    /// L2 bytes live during each step.
    pub occupancy: Vec<usize>,
    pub peak: usize,
    pub peak_step: Option<usize>,
    pub allocated: usize,
    pub freed: usize,
}

// ---------------------------------------------------------------------------
// tile geometry shared with the executor

/// Concrete index ranges of one tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRange {
    pub heads: Range<usize>,
    pub feats: Range<usize>,
    pub rows: Range<usize>,
}

/// Operands a tile reads from L2, as `(operand, residency key, bytes)`.
/// A tile whose key equals the previous tile's key for the same operand
/// reuses the copy already in L1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileIo {
    pub inputs: Vec<(usize, [usize; 4], usize)>,
    pub out_bytes: usize,
    /// L1-only intermediates (never transferred).
    pub scratch: usize,
    pub macs: u64,
    pub softmax_elems: u64,
}

fn chunks(total: usize, size: usize) -> Vec<Range<usize>> {
    (0..total)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(total))
        .collect()
}

/// Tiles of a step in execution order.
pub fn tile_ranges(kernel: KernelId, head: Option<usize>, tile: TileSpec, dims: AttnDims) -> Vec<TileRange> {
    let AttnDims { s, e, p, h } = dims;
    let mut out = Vec::new();
    match kernel {
        KernelId::LinearQ | KernelId::LinearK | KernelId::LinearV => {
            for hr in chunks(h, tile.heads) {
                for fr in chunks(p, tile.feats) {
                    for rr in chunks(s, tile.rows) {
                        out.push(TileRange {
                            heads: hr.clone(),
                            feats: fr.clone(),
                            rows: rr,
                        });
                    }
                }
            }
        }
        KernelId::Gemm1Softmax | KernelId::Gemm2 | KernelId::Fwsa => {
            for hr in chunks(h, tile.heads) {
                for rr in chunks(s, tile.rows) {
                    out.push(TileRange {
                        heads: hr.clone(),
                        feats: 0..0,
                        rows: rr,
                    });
                }
            }
        }
        KernelId::LinearOut => {
            for fr in chunks(e, tile.feats) {
                for rr in chunks(s, tile.rows) {
                    out.push(TileRange {
                        heads: 0..1,
                        feats: fr.clone(),
                        rows: rr,
                    });
                }
            }
        }
        KernelId::DftHead | KernelId::DftFwsaHead => {
            let hh = head.unwrap_or(0);
            for rr in chunks(s, tile.rows) {
                out.push(TileRange {
                    heads: hh..hh + 1,
                    feats: 0..0,
                    rows: rr,
                });
            }
        }
    }
    out
}

/// Transfers, scratch and work of one tile.
pub fn tile_io(kernel: KernelId, r: &TileRange, dims: AttnDims, biases: bool) -> TileIo {
    let AttnDims { s, e, p, .. } = dims;
    let hp = dims.hp();
    let nh = r.heads.len();
    let nf = r.feats.len();
    let nr = r.rows.len();
    let bias = |n: usize| if biases { 2 * n } else { 0 };
    let (h0, h1, f0, f1, r0, r1) = (r.heads.start, r.heads.end, r.feats.start, r.feats.end, r.rows.start, r.rows.end);
    let u = |v: usize| v as u64;
    match kernel {
        KernelId::LinearQ | KernelId::LinearK | KernelId::LinearV => TileIo {
            inputs: vec![
                (0, [r0, r1, 0, 0], nr * e),
                (1, [h0, h1, f0, f1], nh * nf * e + bias(nh * nf)),
            ],
            out_bytes: nh * nf * nr,
            scratch: 0,
            macs: u(nh * nf * nr * e),
            softmax_elems: 0,
        },
        KernelId::Gemm1Softmax => TileIo {
            inputs: vec![(0, [h0, h1, r0, r1], nh * nr * p), (1, [h0, h1, 0, 0], nh * s * p)],
            out_bytes: nh * nr * s,
            scratch: 0,
            macs: u(nh * nr * s * p),
            softmax_elems: u(nh * nr * s),
        },
        KernelId::Gemm2 => TileIo {
            inputs: vec![(0, [h0, h1, r0, r1], nh * nr * s), (1, [h0, h1, 0, 0], nh * p * s)],
            out_bytes: nh * nr * p,
            scratch: 0,
            macs: u(nh * nr * s * p),
            softmax_elems: 0,
        },
        KernelId::LinearOut => TileIo {
            inputs: vec![(0, [r0, r1, 0, 0], nr * hp), (1, [f0, f1, 0, 0], nf * hp + bias(nf))],
            out_bytes: nr * nf,
            scratch: 0,
            macs: u(nr * nf * hp),
            softmax_elems: 0,
        },
        KernelId::Fwsa => TileIo {
            inputs: vec![(0, [0, 0, 0, 0], s * e), (1, [h0, h1, 0, 0], nh * e * e)],
            out_bytes: nh * nr * s,
            scratch: nh * nr * e,
            macs: u(nh * nr * e * e + nh * nr * s * e),
            softmax_elems: u(nh * nr * s),
        },
        KernelId::DftHead => TileIo {
            inputs: vec![
                (0, [h0, r0, r1, 0], nr * p),
                (1, [h0, 0, 0, 0], s * p),
                (2, [h0, 0, 0, 0], p * s),
            ],
            out_bytes: nr * p,
            scratch: nr * s,
            macs: u(2 * nr * s * p),
            softmax_elems: u(nr * s),
        },
        KernelId::DftFwsaHead => TileIo {
            inputs: vec![
                (0, [0, 0, 0, 0], s * e),
                (1, [h0, 0, 0, 0], e * e),
                (2, [h0, 0, 0, 0], p * s),
            ],
            out_bytes: nr * p,
            scratch: nr * e + nr * s,
            macs: u(nr * e * e + nr * s * e + nr * s * p),
            softmax_elems: u(nr * s),
        },
    }
}

/// L1 working set of a full-size tile. Layer-wise kernels double-buffer
/// every transferred operand; depth-first head kernels hold one copy.
pub fn working_set(kernel: KernelId, tile: TileSpec, dims: AttnDims, biases: bool) -> usize {
    let r = TileRange {
        heads: 0..tile.heads,
        feats: 0..tile.feats,
        rows: 0..tile.rows,
    };
    let io = tile_io(kernel, &r, dims, biases);
    let moved: usize = io.inputs.iter().map(|i| i.2).sum::<usize>() + io.out_bytes;
    if kernel.is_dft() {
        moved + io.scratch
    } else {
        2 * moved + io.scratch
    }
}

/// Walk the tiles of a step and total the transfers and work.
fn step_totals(kernel: KernelId, head: Option<usize>, tile: TileSpec, dims: AttnDims, biases: bool) -> (usize, usize, u64, u64) {
    let mut resident: Vec<Option<[usize; 4]>> = vec![None; 3];
    let (mut bin, mut bout, mut macs, mut sm) = (0, 0, 0, 0);
    for r in tile_ranges(kernel, head, tile, dims) {
        let io = tile_io(kernel, &r, dims, biases);
        for (op, key, bytes) in io.inputs {
            if resident[op] != Some(key) {
                bin += bytes;
                resident[op] = Some(key);
            }
        }
        bout += io.out_bytes;
        macs += io.macs;
        sm += io.softmax_elems;
    }
    (bin, bout, macs, sm)
}

// ---------------------------------------------------------------------------
// depth-first tile size

/// L1 bytes of one depth-first tile of `x` query rows of a single head:
/// `x` rows of `Q`, an `x * S` slab of `A`, `x` rows of the output and
/// the full `K` and `V` of the head.
pub fn mem_dft(x: usize, dims: AttnDims) -> Result<usize> {
    let AttnDims { s, p, .. } = dims;
    if x == 0 || x > s {
        return Err(Error::TileOutOfRange { x, s });
    }
    Ok((2 * p + s) * x + 2 * p * s)
}

/// Fused-weight counterpart: `X`, `W*[h]` and `V[h]` resident, per tile
/// `x` rows of `X W*`, of `A` and of the output.
pub fn mem_dft_fwsa(x: usize, dims: AttnDims) -> Result<usize> {
    let AttnDims { s, e, p, .. } = dims;
    if x == 0 || x > s {
        return Err(Error::TileOutOfRange { x, s });
    }
    Ok((e + s + p) * x + s * e + e * e + p * s)
}

/// Depth-first tile size, or the fallback to layer-wise tiling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DftChoice {
    Rows(usize),
    Fallback { needed: usize },
}

fn choose_x(dims: AttnDims, cfg: &MemConfig, mem: fn(usize, AttnDims) -> Result<usize>) -> DftChoice {
    let fits = |x| mem(x, dims).map(|m| m <= cfg.l1_bytes).unwrap_or(false);
    if !fits(1) {
        return DftChoice::Fallback {
            needed: mem(1, dims).unwrap_or(usize::MAX),
        };
    }
    // mem is strictly increasing in x
    let (mut lo, mut hi) = (1, dims.s);
    while lo < hi {
        let mid = lo + (hi - lo + 1) / 2;
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    DftChoice::Rows(lo)
}

/// Largest `x <= S` whose tile fits L1.
pub fn choose_dft_x(dims: AttnDims, cfg: &MemConfig) -> DftChoice {
    choose_x(dims, cfg, mem_dft)
}

pub fn choose_dft_x_fwsa(dims: AttnDims, cfg: &MemConfig) -> DftChoice {
    choose_x(dims, cfg, mem_dft_fwsa)
}

// ---------------------------------------------------------------------------
// layer-wise tile search

fn candidates(kernel: KernelId, dims: AttnDims) -> Vec<TileSpec> {
    let AttnDims { s, e, p, h } = dims;
    let mut out = Vec::new();
    for rows in 1..=s {
        match kernel {
            KernelId::LinearQ | KernelId::LinearK | KernelId::LinearV => {
                for heads in 1..=h {
                    out.push(TileSpec { heads, feats: p, rows });
                }
                for feats in 1..p {
                    out.push(TileSpec { heads: 1, feats, rows });
                }
            }
            KernelId::Gemm1Softmax | KernelId::Gemm2 | KernelId::Fwsa => {
                for heads in 1..=h {
                    out.push(TileSpec { heads, feats: 0, rows });
                }
            }
            KernelId::LinearOut => {
                for feats in 1..=e {
                    out.push(TileSpec { heads: 1, feats, rows });
                }
            }
            KernelId::DftHead | KernelId::DftFwsaHead => unreachable!("depth-first tiles are sized by x"),
        }
    }
    out
}

/// Pick the tile that fills L1 the most, then the one with the larger
/// output tile. The reduction axis is never split.
pub fn choose_lwt_tile(kernel: KernelId, dims: AttnDims, cfg: &MemConfig) -> Result<TileSpec> {
    let out_bytes = |t: TileSpec| {
        let r = TileRange {
            heads: 0..t.heads,
            feats: 0..t.feats,
            rows: 0..t.rows,
        };
        tile_io(kernel, &r, dims, cfg.count_biases).out_bytes
    };
    let mut best: Option<(usize, usize, TileSpec)> = None;
    let mut smallest = usize::MAX;
    for t in candidates(kernel, dims) {
        let ws = working_set(kernel, t, dims, cfg.count_biases);
        smallest = smallest.min(ws);
        if ws > cfg.l1_bytes {
            continue;
        }
        let key = (ws, out_bytes(t));
        if best.map_or(true, |(bw, bo, _)| key > (bw, bo)) {
            best = Some((key.0, key.1, t));
        }
    }
    best.map(|b| b.2).ok_or_else(|| Error::Untileable {
        layer: kernel.name().into(),
        needed: smallest,
        capacity: cfg.l1_bytes,
    })
}

// ---------------------------------------------------------------------------
// plan construction

fn weight_bytes(name: BufName, dims: AttnDims, biases: bool) -> usize {
    let AttnDims { e, p, h, .. } = dims;
    let b = |n: usize| if biases { 2 * n } else { 0 };
    match name {
        BufName::WQ | BufName::WK | BufName::WV => h * p * e + b(h * p),
        BufName::WOut => e * h * p + b(e),
        BufName::WStar => h * e * e,
        _ => unreachable!("not a weight"),
    }
}

struct Builder {
    dims: AttnDims,
    cfg: MemConfig,
    buffers: Vec<(BufName, usize)>,
    steps: Vec<Step>,
}

impl Builder {
    fn new(dims: AttnDims, cfg: MemConfig) -> Self {
        Builder {
            dims,
            cfg,
            buffers: Vec::new(),
            steps: Vec::new(),
        }
    }

    fn buf(&mut self, name: BufName, bytes: usize) -> BufId {
        if let Some(i) = self.buffers.iter().position(|b| b.0 == name) {
            return i;
        }
        self.buffers.push((name, bytes));
        self.buffers.len() - 1
    }

    fn weight(&mut self, name: BufName) -> BufId {
        let bytes = weight_bytes(name, self.dims, self.cfg.count_biases);
        self.buf(name, bytes)
    }

    fn step(&mut self, kernel: KernelId, head: Option<usize>, tile: TileSpec, inputs: Vec<BufId>, outputs: Vec<BufId>) {
        let (bytes_in, bytes_out, macs, softmax_elems) =
            step_totals(kernel, head, tile, self.dims, self.cfg.count_biases);
        self.steps.push(Step {
            kernel,
            head,
            tile,
            inputs,
            outputs,
            allocs: Vec::new(),
            frees: Vec::new(),
            bytes_in,
            bytes_out,
            l1_bytes: working_set(kernel, tile, self.dims, self.cfg.count_biases),
            macs,
            softmax_elems,
        });
    }

    fn lwt_step(&mut self, kernel: KernelId, inputs: Vec<BufId>, outputs: Vec<BufId>) -> Result<()> {
        let tile = choose_lwt_tile(kernel, self.dims, &self.cfg)?;
        self.step(kernel, None, tile, inputs, outputs);
        Ok(())
    }

    /// Assign lifetimes from first/last use and the policy flags.
    fn finish(self, mode: Mode, flavor: Flavor, dft_x: Option<usize>) -> Result<TilingPlan> {
        let last = self.steps.len().saturating_sub(1);
        let mut buffers: Vec<Buffer> = self
            .buffers
            .iter()
            .map(|&(name, bytes)| Buffer {
                name,
                bytes,
                alloc_step: usize::MAX,
                free_step: 0,
            })
            .collect();
        for (i, st) in self.steps.iter().enumerate() {
            for &b in st.inputs.iter().chain(&st.outputs) {
                buffers[b].alloc_step = buffers[b].alloc_step.min(i);
                buffers[b].free_step = buffers[b].free_step.max(i);
            }
        }
        for b in &mut buffers {
            let pinned = (b.name.is_weight() && self.cfg.weights_resident)
                || (b.name == BufName::X && self.cfg.residual_live);
            if b.name == BufName::X || pinned {
                // the block input exists before the first step
                b.alloc_step = 0;
            }
            if pinned || b.name == BufName::Out {
                b.free_step = last;
            }
        }
        let mut steps = self.steps;
        for (id, b) in buffers.iter().enumerate() {
            steps[b.alloc_step].allocs.push(id);
            steps[b.free_step].frees.push(id);
        }
        let plan = TilingPlan {
            mode,
            flavor,
            dims: self.dims,
            cfg: self.cfg,
            dft_x,
            buffers,
            steps,
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Layer-wise plan. MHSA order: Q, K, `Q K^T` + softmax, V, `A V`, output.
pub fn plan_lwt(dims: AttnDims, flavor: Flavor, cfg: &MemConfig) -> Result<TilingPlan> {
    cfg.validate()?;
    let AttnDims { s, e, p, h } = dims;
    let mut b = Builder::new(dims, *cfg);
    let x = b.buf(BufName::X, s * e);
    let a = b.buf(BufName::A, h * s * s);
    match flavor {
        Flavor::Mhsa => {
            let (wq, wk) = (b.weight(BufName::WQ), b.weight(BufName::WK));
            let q = b.buf(BufName::Q, h * s * p);
            let k = b.buf(BufName::K, h * s * p);
            b.lwt_step(KernelId::LinearQ, vec![x, wq], vec![q])?;
            b.lwt_step(KernelId::LinearK, vec![x, wk], vec![k])?;
            b.lwt_step(KernelId::Gemm1Softmax, vec![q, k], vec![a])?;
        }
        Flavor::Fwsa => {
            let ws = b.weight(BufName::WStar);
            b.lwt_step(KernelId::Fwsa, vec![x, ws], vec![a])?;
        }
    }
    let wv = b.weight(BufName::WV);
    let wo = b.weight(BufName::WOut);
    let v = b.buf(BufName::V, h * p * s);
    let m1 = b.buf(BufName::M1, s * h * p);
    let out = b.buf(BufName::Out, s * e);
    b.lwt_step(KernelId::LinearV, vec![x, wv], vec![v])?;
    b.lwt_step(KernelId::Gemm2, vec![a, v], vec![m1])?;
    b.lwt_step(KernelId::LinearOut, vec![m1, wo], vec![out])?;
    b.finish(Mode::Lwt, flavor, None)
}

/// Depth-first plan: projections first, then one fused step per head that
/// releases that head's `Q`, `K`, `V` slices, then the output projection.
pub fn plan_dft(dims: AttnDims, flavor: Flavor, cfg: &MemConfig) -> Result<TilingPlan> {
    cfg.validate()?;
    let AttnDims { s, e, p, h } = dims;
    let choice = match flavor {
        Flavor::Mhsa => choose_dft_x(dims, cfg),
        Flavor::Fwsa => choose_dft_x_fwsa(dims, cfg),
    };
    let x_rows = match choice {
        DftChoice::Rows(x) => x,
        DftChoice::Fallback { needed } => {
            return Err(Error::DftNotApplicable {
                needed,
                capacity: cfg.l1_bytes,
            })
        }
    };
    let mut b = Builder::new(dims, *cfg);
    let x = b.buf(BufName::X, s * e);
    let head_bufs = |b: &mut Builder, f: fn(usize) -> BufName| -> Vec<BufId> { (0..h).map(|i| b.buf(f(i), s * p)).collect() };
    let qs = match flavor {
        Flavor::Mhsa => {
            let (wq, wk) = (b.weight(BufName::WQ), b.weight(BufName::WK));
            let qs = head_bufs(&mut b, BufName::QHead);
            let ks = head_bufs(&mut b, BufName::KHead);
            b.lwt_step(KernelId::LinearQ, vec![x, wq], qs.clone())?;
            b.lwt_step(KernelId::LinearK, vec![x, wk], ks.clone())?;
            Some((qs, ks))
        }
        Flavor::Fwsa => None,
    };
    let wstar = (flavor == Flavor::Fwsa).then(|| b.weight(BufName::WStar));
    let wv = b.weight(BufName::WV);
    let vs = head_bufs(&mut b, BufName::VHead);
    b.lwt_step(KernelId::LinearV, vec![x, wv], vs.clone())?;
    let ms = head_bufs(&mut b, BufName::M1Head);
    let tile = TileSpec {
        heads: 1,
        feats: p,
        rows: x_rows,
    };
    for hh in 0..h {
        match (&qs, wstar) {
            (Some((qs, ks)), _) => b.step(KernelId::DftHead, Some(hh), tile, vec![qs[hh], ks[hh], vs[hh]], vec![ms[hh]]),
            (None, Some(ws)) => b.step(KernelId::DftFwsaHead, Some(hh), tile, vec![x, ws, vs[hh]], vec![ms[hh]]),
            (None, None) => unreachable!(),
        }
    }
    let wo = b.weight(BufName::WOut);
    let out = b.buf(BufName::Out, s * e);
    let mut ins = ms;
    ins.push(wo);
    b.lwt_step(KernelId::LinearOut, ins, vec![out])?;
    b.finish(Mode::Dft, flavor, Some(x_rows))
}

/// Depth-first when it applies and lowers the L2 peak, layer-wise
/// otherwise. Returns the plan and the reason for the choice.
pub fn plan_auto(dims: AttnDims, flavor: Flavor, cfg: &MemConfig) -> Result<(TilingPlan, String)> {
    let lwt = plan_lwt(dims, flavor, cfg);
    match plan_dft(dims, flavor, cfg) {
        Err(Error::DftNotApplicable { needed, capacity }) => {
            let why = format!("fallback to lwt: one-row depth-first tile needs {needed} B > L1 {capacity} B");
            Ok((lwt?, why))
        }
        Err(e) => Err(e),
        Ok(dft) => {
            let dp = memory_timeline(&dft).peak;
            match lwt {
                Ok(l) => {
                    let lp = memory_timeline(&l).peak;
                    if dp < lp {
                        Ok((dft, format!("dft: L2 peak {dp} B < lwt {lp} B")))
                    } else {
                        Ok((l, format!("lwt: depth-first peak {dp} B does not improve on lwt {lp} B")))
                    }
                }
                Err(_) => Ok((dft, format!("dft: layer-wise plan infeasible, depth-first peak {dp} B"))),
            }
        }
    }
}

/// Liveness-based L2 occupancy per step.
pub fn memory_timeline(plan: &TilingPlan) -> MemoryTimeline {
    let n = plan.steps.len();
    let mut occupancy = vec![0usize; n];
    for b in &plan.buffers {
        for occ in occupancy.iter_mut().take(b.free_step + 1).skip(b.alloc_step) {
            *occ += b.bytes;
        }
    }
    let allocated = plan
        .steps
        .iter()
        .flat_map(|s| &s.allocs)
        .map(|&b| plan.buffers[b].bytes)
        .sum();
    let freed = plan.steps.iter().flat_map(|s| &s.frees).map(|&b| plan.buffers[b].bytes).sum();
    let peak_step = (0..n).max_by_key(|&i| (occupancy[i], std::cmp::Reverse(i)));
    MemoryTimeline {
        peak: peak_step.map_or(0, |i| occupancy[i]),
        occupancy,
        peak_step,
        allocated,
        freed,
    }
}

/// Decimal kilobytes.
pub fn kb(bytes: usize) -> f64 {
    bytes as f64 / 1000.0
}

impl TilingPlan {
    pub fn timeline(&self) -> MemoryTimeline {
        memory_timeline(self)
    }

    pub fn peak_l1(&self) -> usize {
        self.steps.iter().map(|s| s.l1_bytes).max().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.steps.iter().map(|s| s.macs).sum()
    }

    pub fn buffer_id(&self, name: BufName) -> Option<BufId> {
        self.buffers.iter().position(|b| b.name == name)
    }

    /// Structural checks: lifetimes cover every use, every step fits L1,
    /// the L2 peak fits L2.
    pub fn validate(&self) -> Result<()> {
        for (i, st) in self.steps.iter().enumerate() {
            for &b in st.inputs.iter().chain(&st.outputs) {
                let buf = self
                    .buffers
                    .get(b)
                    .ok_or_else(|| Error::InvalidPlan(format!("step {i} references unknown buffer {b}")))?;
                if buf.alloc_step > i || buf.free_step < i {
                    return Err(Error::InvalidPlan(format!(
                        "step {i} ({}) uses {} outside its lifetime {}..={}",
                        st.kernel, buf.name, buf.alloc_step, buf.free_step
                    )));
                }
            }
            if st.l1_bytes > self.cfg.l1_bytes {
                return Err(Error::WorkingSetViolation {
                    step: i,
                    kernel: st.kernel.name().into(),
                    used: st.l1_bytes,
                    capacity: self.cfg.l1_bytes,
                });
            }
        }
        for b in &self.buffers {
            if b.alloc_step > b.free_step {
                return Err(Error::InvalidPlan(format!("{} freed before allocation", b.name)));
            }
        }
        let peak = memory_timeline(self).peak;
        if peak > self.cfg.l2_bytes {
            return Err(Error::CapacityExceeded {
                needed: peak,
                capacity: self.cfg.l2_bytes,
            });
        }
        Ok(())
    }

    /// Human-readable schedule listing.
    pub fn render(&self) -> String {
        let tl = memory_timeline(self);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} {} plan, {}{}",
            self.flavor,
            self.mode,
            self.dims,
            self.dft_x.map(|x| format!(", x={x}")).unwrap_or_default()
        );
        let _ = writeln!(out, "step kernel            tile(h,f,s)    in_B     out_B    L1_B     L2_B     alloc / free");
        for (i, st) in self.steps.iter().enumerate() {
            let kernel = match st.head {
                Some(h) => format!("{}[{h}]", st.kernel),
                None => st.kernel.to_string(),
            };
            let names = |ids: &[BufId]| ids.iter().map(|&b| self.buffers[b].name.to_string()).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                out,
                "{i:<4} {kernel:<17} {:<14} {:<8} {:<8} {:<8} {:<8} +[{}] -[{}]",
                format!("{},{},{}", st.tile.heads, st.tile.feats, st.tile.rows),
                st.bytes_in,
                st.bytes_out,
                st.l1_bytes,
                tl.occupancy[i],
                names(&st.allocs),
                names(&st.frees)
            );
        }
        let _ = writeln!(
            out,
            "peak L2 {} B ({:.1} KB) at step {}",
            tl.peak,
            kb(tl.peak),
            tl.peak_step.map_or("-".into(), |s| s.to_string())
        );
        out
    }
}
