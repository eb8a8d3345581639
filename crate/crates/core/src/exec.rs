//! Functional execution of attention blocks over a simulated L1/L2.
//!
//! [`run_untiled`] calls the whole-tensor kernels and is the reference.
//! [`run_tiled`] follows a [`TilingPlan`] step by step: tiles are copied
//! from L2 buffers into L1 buffers, computed with the same inner kernels
//! and copied back, while every byte moved and every L1/L2 byte held is
//! counted. [`run_parallel`] splits each layer over workers.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttentionBlock, Flavor, ScorePath};
use crate::kernels::{
    fwsa_fused, linear_core, linear_irl, linear_out, linear_wrl, m2_core, matmul_m2, matmul_softmax, score_core,
    LinearShape, LinearWeights, OutOrder, ScoreShape,
};
use crate::planner::{tile_io, tile_ranges, BufId, BufName, KernelId, MemConfig, Step, TileRange, TilingPlan};
use crate::quant::ScoreScale;
use crate::tensor::{AttnDims, Layout, QuantTensor, RequantParams};

/// Output slice owned by one worker for one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSlice {
    pub kernel: KernelId,
    pub worker: usize,
    /// `"H"` or `"S"`.
    pub axis: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecStats {
    pub macs: BTreeMap<KernelId, u64>,
    pub l2_to_l1: usize,
    pub l1_to_l2: usize,
    pub peak_l1: usize,
    pub peak_l2: usize,
    pub steps: usize,
    pub worker_slices: Vec<WorkerSlice>,
}

impl ExecStats {
    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn add_macs(&mut self, k: KernelId, n: u64) {
        *self.macs.entry(k).or_insert(0) += n;
    }
}

fn check_input(block: &AttentionBlock, x: &QuantTensor) -> Result<()> {
    block.validate()?;
    let d = block.dims;
    if x.layout() != Layout::Se || x.shape() != [d.s, d.e] {
        return Err(Error::ShapeMismatch {
            op: "attention block",
            detail: format!("X is {:?} {}, expected SE [{}, {}]", x.shape(), x.layout(), d.s, d.e),
        });
    }
    Ok(())
}

fn layer_macs(block: &AttentionBlock) -> Vec<(KernelId, u64)> {
    let AttnDims { s, e, p, h } = block.dims;
    let (s, e, p, h) = (s as u64, e as u64, p as u64, h as u64);
    let proj = h * s * p * e;
    let mut v = match block.flavor() {
        Flavor::Mhsa => vec![
            (KernelId::LinearQ, proj),
            (KernelId::LinearK, proj),
            (KernelId::Gemm1Softmax, h * s * s * p),
        ],
        Flavor::Fwsa => vec![(KernelId::Fwsa, h * s * e * e + h * s * s * e)],
    };
    v.extend([
        (KernelId::LinearV, proj),
        (KernelId::Gemm2, h * s * s * p),
        (KernelId::LinearOut, s * e * h * p),
    ]);
    v
}

/// Whole-tensor execution. Every tensor of the block must fit L2 at once.
pub fn run_untiled(block: &AttentionBlock, x: &QuantTensor, cfg: &MemConfig) -> Result<(QuantTensor, ExecStats)> {
    check_input(block, x)?;
    let d = block.dims;
    let acts = d.s * d.e * 2 + 3 * d.h * d.s * d.p + d.h * d.s * d.s + d.s * d.hp();
    let needed = acts + block.weight_bytes() + if cfg.count_biases { block.bias_bytes() } else { 0 };
    if needed > cfg.l2_bytes {
        return Err(Error::CapacityExceeded {
            needed,
            capacity: cfg.l2_bytes,
        });
    }
    let a = match &block.scores {
        ScorePath::Mhsa { q, k, score } => {
            let qt = linear_irl(x, q, d)?;
            let kt = linear_irl(x, k, d)?;
            matmul_softmax(&qt, &kt, score, d)?
        }
        ScorePath::Fwsa(fw) => fwsa_fused(x, fw, d)?,
    };
    let v = linear_wrl(x, &block.v, d)?;
    let m1 = matmul_m2(&a, &v, &block.m1_rp, block.m1_exp, d)?;
    let out = linear_out(&m1, &block.out, d)?;
    let mut stats = ExecStats {
        peak_l2: needed,
        ..ExecStats::default()
    };
    for (k, n) in layer_macs(block) {
        stats.add_macs(k, n);
        stats.steps += 1;
    }
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// simulated memories

/// Byte accounting of the L1 scratchpad.
#[derive(Debug, Clone)]
pub struct L1Arena {
    cap: usize,
    used: usize,
    peak: usize,
    step: usize,
    kernel: KernelId,
}

impl L1Arena {
    pub fn new(cap: usize) -> Self {
        L1Arena {
            cap,
            used: 0,
            peak: 0,
            step: 0,
            kernel: KernelId::LinearQ,
        }
    }

    pub fn alloc(&mut self, bytes: usize) -> Result<()> {
        self.used += bytes;
        if self.used > self.cap {
            return Err(Error::WorkingSetViolation {
                step: self.step,
                kernel: self.kernel.name().into(),
                used: self.used,
                capacity: self.cap,
            });
        }
        self.peak = self.peak.max(self.used);
        Ok(())
    }

    pub fn free(&mut self, bytes: usize) {
        debug_assert!(bytes <= self.used);
        self.used -= bytes;
    }

    pub fn peak(&self) -> usize {
        self.peak
    }
}

struct L2Store {
    data: HashMap<BufId, Vec<i8>>,
    live: HashMap<BufId, usize>,
    cap: usize,
    used: usize,
    peak: usize,
}

impl L2Store {
    fn alloc(&mut self, id: BufId, bytes: usize, materialize: bool) -> Result<()> {
        self.used += bytes;
        if self.used > self.cap {
            return Err(Error::CapacityExceeded {
                needed: self.used,
                capacity: self.cap,
            });
        }
        self.peak = self.peak.max(self.used);
        self.live.insert(id, bytes);
        if materialize {
            self.data.insert(id, vec![0; bytes]);
        }
        Ok(())
    }

    fn free(&mut self, id: BufId) {
        if let Some(b) = self.live.remove(&id) {
            self.used -= b;
        }
        self.data.remove(&id);
    }

    fn require(&self, id: BufId, step: usize) -> Result<()> {
        if self.live.contains_key(&id) {
            Ok(())
        } else {
            Err(Error::InvalidPlan(format!("step {step} touches buffer {id} which is not live in L2")))
        }
    }

    fn get(&self, id: BufId, step: usize) -> Result<&[i8]> {
        self.require(id, step)?;
        self.data
            .get(&id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidPlan(format!("step {step} reads unmaterialized buffer {id}")))
    }

    fn take(&mut self, id: BufId, step: usize) -> Result<Vec<i8>> {
        self.require(id, step)?;
        self.data
            .remove(&id)
            .ok_or_else(|| Error::InvalidPlan(format!("step {step} writes unmaterialized buffer {id}")))
    }
}

/// L1 bytes held while tile `t` computes under double buffering: the
/// current operand tiles, the prefetch of tile `t + 1`'s changed operands,
/// the current output tile, the previous output tile still draining, and
/// L1-only scratch.
fn double_buffered_usage(kernel: KernelId, tiles: &[TileRange], t: usize, dims: AttnDims, biases: bool) -> usize {
    let cur = tile_io(kernel, &tiles[t], dims, biases);
    let mut bytes: usize = cur.inputs.iter().map(|i| i.2).sum::<usize>() + cur.out_bytes + cur.scratch;
    if let Some(next) = tiles.get(t + 1) {
        let nio = tile_io(kernel, next, dims, biases);
        for (op, key, b) in &nio.inputs {
            if cur.inputs.iter().any(|c| c.0 == *op && c.1 != *key) {
                bytes += b;
            }
        }
    }
    if t > 0 {
        bytes += tile_io(kernel, &tiles[t - 1], dims, biases).out_bytes;
    }
    bytes
}

/// Replay the L1 allocations of one depth-first head step and call
/// `compute` for each row tile while its buffers are held.
fn dft_head_pass<F>(arena: &mut L1Arena, kernel: KernelId, dims: AttnDims, x: usize, mut compute: F) -> Result<()>
where
    F: FnMut(Range<usize>) -> Result<()>,
{
    let AttnDims { s, e, p, .. } = dims;
    let resident: Vec<usize> = match kernel {
        KernelId::DftHead => vec![s * p, p * s],
        KernelId::DftFwsaHead => vec![s * e, e * e, p * s],
        other => return Err(Error::InvalidPlan(format!("{other} is not a depth-first kernel"))),
    };
    for &b in &resident {
        arena.alloc(b)?;
    }
    let mut r0 = 0;
    while r0 < s {
        let rows = r0..(r0 + x).min(s);
        let nr = rows.len();
        let lhs = if kernel == KernelId::DftHead { nr * p } else { nr * e };
        let tile_bufs = [lhs, nr * s, nr * p];
        for &b in &tile_bufs {
            arena.alloc(b)?;
        }
        compute(rows.clone())?;
        for &b in &tile_bufs {
            arena.free(b);
        }
        r0 = rows.end;
    }
    for &b in &resident {
        arena.free(b);
    }
    Ok(())
}

/// Peak L1 bytes of one depth-first head pass with `x`-row tiles.
pub fn simulate_dft_head_l1(kernel: KernelId, dims: AttnDims, x: usize) -> Result<usize> {
    if x == 0 || x > dims.s {
        return Err(Error::TileOutOfRange { x, s: dims.s });
    }
    let mut arena = L1Arena::new(usize::MAX);
    dft_head_pass(&mut arena, kernel, dims, x, |_| Ok(()))?;
    Ok(arena.peak())
}

// ---------------------------------------------------------------------------
// tiled execution

struct Ctx<'a> {
    block: &'a AttentionBlock,
    plan: &'a TilingPlan,
    l2: L2Store,
    stats: ExecStats,
}

/// Operand tiles resident in L1 for the current step, keyed like
/// [`crate::planner::TileIo::inputs`].
struct Resident {
    keys: Vec<Option<[usize; 4]>>,
    data: Vec<Vec<i8>>,
}

impl Resident {
    fn new() -> Self {
        Resident {
            keys: vec![None; 3],
            data: vec![Vec::new(); 3],
        }
    }

    /// Copy the operand tile in unless the same tile is already resident.
    fn load(&mut self, op: usize, key: [usize; 4], expect: usize, moved: &mut usize, gather: impl FnOnce() -> Vec<i8>) {
        if self.keys[op] != Some(key) {
            let d = gather();
            // `expect` may include bias bytes that travel with the weight tile
            debug_assert!(d.len() <= expect);
            *moved += expect;
            self.data[op] = d;
            self.keys[op] = Some(key);
        }
    }
}

fn tile_bias(rp: &RequantParams, idx: impl Iterator<Item = usize>) -> RequantParams {
    let bias = if rp.bias.is_empty() {
        Vec::new()
    } else {
        idx.map(|i| rp.bias[i]).collect()
    };
    RequantParams {
        eps_mul: rp.eps_mul,
        eps_div: rp.eps_div,
        bias,
    }
}

fn gather_proj_weights(w: &LinearWeights, r: &TileRange, dims: AttnDims) -> (Vec<i8>, RequantParams) {
    let AttnDims { e, p, .. } = dims;
    let wd = w.w.data();
    let mut out = Vec::with_capacity(r.heads.len() * r.feats.len() * e);
    for h in r.heads.clone() {
        for f in r.feats.clone() {
            let o = (h * p + f) * e;
            out.extend_from_slice(&wd[o..o + e]);
        }
    }
    let idx = r.heads.clone().flat_map(|h| r.feats.clone().map(move |f| h * p + f));
    (out, tile_bias(&w.rp, idx))
}

impl Ctx<'_> {
    fn weights(&self, k: KernelId) -> &LinearWeights {
        match (k, &self.block.scores) {
            (KernelId::LinearQ, ScorePath::Mhsa { q, .. }) => q,
            (KernelId::LinearK, ScorePath::Mhsa { k, .. }) => k,
            (KernelId::LinearOut, _) => &self.block.out,
            _ => &self.block.v,
        }
    }

    fn score(&self) -> ScoreScale {
        match &self.block.scores {
            ScorePath::Mhsa { score, .. } => *score,
            ScorePath::Fwsa(fw) => fw.score,
        }
    }

    fn name(&self, id: BufId) -> BufName {
        self.plan.buffers[id].name
    }

    fn run_step(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        arena.step = i;
        arena.kernel = step.kernel;
        for &b in step.inputs.iter().chain(&step.outputs) {
            if !self.name(b).is_weight() {
                self.l2.require(b, i)?;
            }
        }
        match step.kernel {
            KernelId::LinearQ | KernelId::LinearK | KernelId::LinearV => self.projection(i, step, arena),
            KernelId::Gemm1Softmax => self.gemm1(i, step, arena),
            KernelId::Gemm2 => self.gemm2(i, step, arena),
            KernelId::LinearOut => self.out_proj(i, step, arena),
            KernelId::Fwsa => self.fwsa(i, step, arena),
            KernelId::DftHead | KernelId::DftFwsaHead => self.dft_head(i, step, arena),
        }
    }

    /// Per-tile L1 accounting for layer-wise steps.
    fn account(&self, arena: &mut L1Arena, kernel: KernelId, tiles: &[TileRange], t: usize) -> Result<usize> {
        let u = double_buffered_usage(kernel, tiles, t, self.block.dims, self.plan.cfg.count_biases);
        arena.alloc(u)?;
        Ok(u)
    }

    fn projection(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { s, e, p, .. } = d;
        let x_id = step.inputs[0];
        let tiles = tile_ranges(step.kernel, step.head, step.tile, d);
        let order = if step.kernel == KernelId::LinearV {
            OutOrder::FeatMajor
        } else {
            OutOrder::RowMajor
        };
        let mut outs: Vec<Vec<i8>> = step.outputs.iter().map(|&o| self.l2.take(o, i)).collect::<Result<_>>()?;
        let per_head = matches!(self.name(step.outputs[0]), BufName::QHead(_) | BufName::KHead(_) | BufName::VHead(_));
        let w = self.weights(step.kernel).clone();
        let mut res = Resident::new();
        let mut moved = 0;
        for (t, r) in tiles.iter().enumerate() {
            let u = self.account(arena, step.kernel, &tiles, t)?;
            let io = tile_io(step.kernel, r, d, self.plan.cfg.count_biases);
            let xd = self.l2.get(x_id, i)?;
            res.load(0, io.inputs[0].1, io.inputs[0].2, &mut moved, || xd[r.rows.start * e..r.rows.end * e].to_vec());
            let (wt, rp) = gather_proj_weights(&w, r, d);
            res.load(1, io.inputs[1].1, io.inputs[1].2, &mut moved, || wt);
            let (nh, nf, nr) = (r.heads.len(), r.feats.len(), r.rows.len());
            let mut ot = vec![0i8; nh * nf * nr];
            let shape = LinearShape {
                heads: nh,
                rows: nr,
                feats: nf,
                red: e,
            };
            linear_core(&res.data[0], &res.data[1], &rp, shape, order, 0..nh, 0..nr, &mut ot);
            for (hl, hh) in r.heads.clone().enumerate() {
                for (fl, f) in r.feats.clone().enumerate() {
                    for (rl, row) in r.rows.clone().enumerate() {
                        let v = match order {
                            OutOrder::RowMajor => ot[(hl * nr + rl) * nf + fl],
                            OutOrder::FeatMajor => ot[(hl * nf + fl) * nr + rl],
                        };
                        let (buf, off) = match (per_head, order) {
                            (true, OutOrder::RowMajor) => (hh, row * p + f),
                            (true, OutOrder::FeatMajor) => (hh, f * s + row),
                            (false, OutOrder::RowMajor) => (0, (hh * s + row) * p + f),
                            (false, OutOrder::FeatMajor) => (0, (hh * p + f) * s + row),
                        };
                        outs[buf][off] = v;
                    }
                }
            }
            self.stats.l1_to_l2 += ot.len();
            self.stats.add_macs(step.kernel, io.macs);
            arena.free(u);
        }
        self.stats.l2_to_l1 += moved;
        for (&o, data) in step.outputs.iter().zip(outs) {
            self.l2.data.insert(o, data);
        }
        Ok(())
    }

    fn gemm1(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { s, p, h, .. } = d;
        let (q_id, k_id, a_id) = (step.inputs[0], step.inputs[1], step.outputs[0]);
        let score = self.score();
        let tiles = tile_ranges(step.kernel, step.head, step.tile, d);
        let mut a = self.l2.take(a_id, i)?;
        let mut res = Resident::new();
        let mut moved = 0;
        for (t, r) in tiles.iter().enumerate() {
            let u = self.account(arena, step.kernel, &tiles, t)?;
            let io = tile_io(step.kernel, r, d, false);
            let (nh, nr) = (r.heads.len(), r.rows.len());
            let qd = self.l2.get(q_id, i)?;
            res.load(0, io.inputs[0].1, io.inputs[0].2, &mut moved, || {
                r.heads
                    .clone()
                    .flat_map(|hh| qd[(hh * s + r.rows.start) * p..(hh * s + r.rows.end) * p].iter().copied())
                    .collect()
            });
            let kd = self.l2.get(k_id, i)?;
            res.load(1, io.inputs[1].1, io.inputs[1].2, &mut moved, || kd[r.heads.start * s * p..r.heads.end * s * p].to_vec());
            let mut ot = vec![0i8; nr * nh * s];
            let shape = ScoreShape {
                heads: nh,
                rows_q: nr,
                rows_k: s,
                red: p,
                shared_k: false,
            };
            score_core(&res.data[0], &res.data[1], &score, shape, 0..nh, 0..nr, &mut ot);
            scatter_shs(&ot, &mut a, r, h, s);
            self.stats.l1_to_l2 += ot.len();
            self.stats.add_macs(step.kernel, io.macs);
            arena.free(u);
        }
        self.stats.l2_to_l1 += moved;
        self.l2.data.insert(a_id, a);
        Ok(())
    }

    fn gemm2(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { s, p, h, .. } = d;
        let (a_id, v_id, m_id) = (step.inputs[0], step.inputs[1], step.outputs[0]);
        let tiles = tile_ranges(step.kernel, step.head, step.tile, d);
        let mut m1 = self.l2.take(m_id, i)?;
        let rp = self.block.m1_rp.clone();
        let mut res = Resident::new();
        let mut moved = 0;
        for (t, r) in tiles.iter().enumerate() {
            let u = self.account(arena, step.kernel, &tiles, t)?;
            let io = tile_io(step.kernel, r, d, false);
            let (nh, nr) = (r.heads.len(), r.rows.len());
            let ad = self.l2.get(a_id, i)?;
            res.load(0, io.inputs[0].1, io.inputs[0].2, &mut moved, || {
                let mut v = Vec::with_capacity(nr * nh * s);
                for row in r.rows.clone() {
                    v.extend_from_slice(&ad[(row * h + r.heads.start) * s..(row * h + r.heads.end) * s]);
                }
                v
            });
            let vd = self.l2.get(v_id, i)?;
            res.load(1, io.inputs[1].1, io.inputs[1].2, &mut moved, || vd[r.heads.start * p * s..r.heads.end * p * s].to_vec());
            let mut ot = vec![0i8; nr * nh * p];
            m2_core(&res.data[0], &res.data[1], &rp, nh, nr, s, p, 0..nh, 0..nr, &mut ot);
            for (rl, row) in r.rows.clone().enumerate() {
                let dst = (row * h + r.heads.start) * p;
                m1[dst..dst + nh * p].copy_from_slice(&ot[rl * nh * p..(rl + 1) * nh * p]);
            }
            self.stats.l1_to_l2 += ot.len();
            self.stats.add_macs(step.kernel, io.macs);
            arena.free(u);
        }
        self.stats.l2_to_l1 += moved;
        self.l2.data.insert(m_id, m1);
        Ok(())
    }

    fn out_proj(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { e, p, .. } = d;
        let hp = d.hp();
        let out_id = step.outputs[0];
        let m_ids: Vec<BufId> = step.inputs.iter().copied().filter(|&b| !self.name(b).is_weight()).collect();
        let tiles = tile_ranges(step.kernel, step.head, step.tile, d);
        let mut out = self.l2.take(out_id, i)?;
        let w = self.block.out.clone();
        let mut res = Resident::new();
        let mut moved = 0;
        for (t, r) in tiles.iter().enumerate() {
            let u = self.account(arena, step.kernel, &tiles, t)?;
            let io = tile_io(step.kernel, r, d, self.plan.cfg.count_biases);
            let (nf, nr) = (r.feats.len(), r.rows.len());
            let srcs: Vec<&[i8]> = m_ids.iter().map(|&m| self.l2.get(m, i)).collect::<Result<_>>()?;
            res.load(0, io.inputs[0].1, io.inputs[0].2, &mut moved, || {
                if srcs.len() == 1 {
                    srcs[0][r.rows.start * hp..r.rows.end * hp].to_vec()
                } else {
                    // per-head M1 slices, each [S][P]
                    r.rows
                        .clone()
                        .flat_map(|row| srcs.iter().flat_map(move |m| m[row * p..(row + 1) * p].iter().copied()))
                        .collect()
                }
            });
            let wd = w.w.data();
            res.load(1, io.inputs[1].1, io.inputs[1].2, &mut moved, || wd[r.feats.start * hp..r.feats.end * hp].to_vec());
            let rp = tile_bias(&w.rp, r.feats.clone());
            let mut ot = vec![0i8; nr * nf];
            let shape = LinearShape {
                heads: 1,
                rows: nr,
                feats: nf,
                red: hp,
            };
            linear_core(&res.data[0], &res.data[1], &rp, shape, OutOrder::RowMajor, 0..1, 0..nr, &mut ot);
            for (rl, row) in r.rows.clone().enumerate() {
                out[row * e + r.feats.start..row * e + r.feats.end].copy_from_slice(&ot[rl * nf..(rl + 1) * nf]);
            }
            self.stats.l1_to_l2 += ot.len();
            self.stats.add_macs(step.kernel, io.macs);
            arena.free(u);
        }
        self.stats.l2_to_l1 += moved;
        self.l2.data.insert(out_id, out);
        Ok(())
    }

    fn fwsa(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { s, e, h, .. } = d;
        let ScorePath::Fwsa(fw) = &self.block.scores else {
            return Err(Error::InvalidPlan("fused-weight step on an MHSA block".into()));
        };
        let fw = fw.clone();
        let (x_id, a_id) = (step.inputs[0], step.outputs[0]);
        let tiles = tile_ranges(step.kernel, step.head, step.tile, d);
        let mut a = self.l2.take(a_id, i)?;
        let mut res = Resident::new();
        let mut moved = 0;
        for (t, r) in tiles.iter().enumerate() {
            let u = self.account(arena, step.kernel, &tiles, t)?;
            let io = tile_io(step.kernel, r, d, false);
            let (nh, nr) = (r.heads.len(), r.rows.len());
            let xd = self.l2.get(x_id, i)?;
            res.load(0, io.inputs[0].1, io.inputs[0].2, &mut moved, || xd.to_vec());
            let wd = fw.w_star.data();
            res.load(1, io.inputs[1].1, io.inputs[1].2, &mut moved, || wd[r.heads.start * e * e..r.heads.end * e * e].to_vec());
            let mut m2 = vec![0i8; nh * nr * e];
            let shape = LinearShape {
                heads: nh,
                rows: nr,
                feats: e,
                red: e,
            };
            let xrows = &res.data[0][r.rows.start * e..r.rows.end * e];
            linear_core(xrows, &res.data[1], &fw.rp, shape, OutOrder::RowMajor, 0..nh, 0..nr, &mut m2);
            let mut ot = vec![0i8; nr * nh * s];
            let sshape = ScoreShape {
                heads: nh,
                rows_q: nr,
                rows_k: s,
                red: e,
                shared_k: true,
            };
            score_core(&m2, &res.data[0], &fw.score, sshape, 0..nh, 0..nr, &mut ot);
            scatter_shs(&ot, &mut a, r, h, s);
            self.stats.l1_to_l2 += ot.len();
            self.stats.add_macs(step.kernel, io.macs);
            arena.free(u);
        }
        self.stats.l2_to_l1 += moved;
        self.l2.data.insert(a_id, a);
        Ok(())
    }

    fn dft_head(&mut self, i: usize, step: &Step, arena: &mut L1Arena) -> Result<()> {
        let d = self.block.dims;
        let AttnDims { s, e, p, .. } = d;
        let hh = step.head.ok_or_else(|| Error::InvalidPlan(format!("step {i}: depth-first step without head")))?;
        let m_id = step.outputs[0];
        let mut m = self.l2.take(m_id, i)?;
        let rp = self.block.m1_rp.clone();
        let score = self.score();
        let head = ScoreShape {
            heads: 1,
            rows_q: 0,
            rows_k: s,
            red: p,
            shared_k: false,
        };
        // resident operands, loaded once per head
        let (lhs_src, k_or_x, v) = match step.kernel {
            KernelId::DftHead => (
                Some(self.l2.get(step.inputs[0], i)?.to_vec()),
                self.l2.get(step.inputs[1], i)?.to_vec(),
                self.l2.get(step.inputs[2], i)?.to_vec(),
            ),
            _ => (None, self.l2.get(step.inputs[0], i)?.to_vec(), self.l2.get(step.inputs[2], i)?.to_vec()),
        };
        let fw = match &self.block.scores {
            ScorePath::Fwsa(fw) => Some(fw.clone()),
            ScorePath::Mhsa { .. } => None,
        };
        let w_head = fw.as_ref().map(|fw| fw.w_star.data()[hh * e * e..(hh + 1) * e * e].to_vec());
        let mut moved = k_or_x.len() + v.len() + w_head.as_ref().map_or(0, Vec::len);
        let mut written = 0;
        let mut macs = 0u64;
        dft_head_pass(arena, step.kernel, d, step.tile.rows, |rows| {
            let nr = rows.len();
            let mut a_slab = vec![0i8; nr * s];
            let mut mt = vec![0i8; nr * p];
            match (&lhs_src, &fw, &w_head) {
                (Some(q), _, _) => {
                    let qt = &q[rows.start * p..rows.end * p];
                    moved += qt.len();
                    let shape = ScoreShape { rows_q: nr, ..head };
                    // row quads: scores, softmax and A V back to back
                    let mut r0 = 0;
                    while r0 < nr {
                        let quad = r0..(r0 + 4).min(nr);
                        score_core(qt, &k_or_x, &score, shape, 0..1, quad.clone(), &mut a_slab);
                        m2_core(&a_slab, &v, &rp, 1, nr, s, p, 0..1, quad.clone(), &mut mt);
                        r0 = quad.end;
                    }
                    macs += 2 * (nr * s * p) as u64;
                }
                (None, Some(fw), Some(wh)) => {
                    let mut m2 = vec![0i8; nr * e];
                    let lshape = LinearShape {
                        heads: 1,
                        rows: nr,
                        feats: e,
                        red: e,
                    };
                    linear_core(&k_or_x[rows.start * e..rows.end * e], wh, &fw.rp, lshape, OutOrder::RowMajor, 0..1, 0..nr, &mut m2);
                    let shape = ScoreShape {
                        heads: 1,
                        rows_q: nr,
                        rows_k: s,
                        red: e,
                        shared_k: true,
                    };
                    let mut r0 = 0;
                    while r0 < nr {
                        let quad = r0..(r0 + 4).min(nr);
                        score_core(&m2, &k_or_x, &fw.score, shape, 0..1, quad.clone(), &mut a_slab);
                        m2_core(&a_slab, &v, &rp, 1, nr, s, p, 0..1, quad.clone(), &mut mt);
                        r0 = quad.end;
                    }
                    macs += (nr * e * e + nr * s * e + nr * s * p) as u64;
                }
                _ => return Err(Error::InvalidPlan("depth-first kernel does not match block flavor".into())),
            }
            m[rows.start * p..rows.end * p].copy_from_slice(&mt);
            written += mt.len();
            Ok(())
        })?;
        self.stats.l2_to_l1 += moved;
        self.stats.l1_to_l2 += written;
        self.stats.add_macs(step.kernel, macs);
        self.l2.data.insert(m_id, m);
        Ok(())
    }
}

fn scatter_shs(tile: &[i8], a: &mut [i8], r: &TileRange, h: usize, s: usize) {
    let nh = r.heads.len();
    for (rl, row) in r.rows.clone().enumerate() {
        let dst = (row * h + r.heads.start) * s;
        a[dst..dst + nh * s].copy_from_slice(&tile[rl * nh * s..(rl + 1) * nh * s]);
    }
}

/// Execute `plan` for `block`. Only planned buffers exist in L2; L1 use is
/// checked tile by tile against the plan's capacity.
pub fn run_tiled(plan: &TilingPlan, block: &AttentionBlock, x: &QuantTensor) -> Result<(QuantTensor, ExecStats)> {
    check_input(block, x)?;
    if plan.dims != block.dims || plan.flavor != block.flavor() {
        return Err(Error::InvalidPlan(format!(
            "plan is for {} {}, block is {} {}",
            plan.flavor,
            plan.dims,
            block.flavor(),
            block.dims
        )));
    }
    plan.validate()?;
    let mut ctx = Ctx {
        block,
        plan,
        l2: L2Store {
            data: HashMap::new(),
            live: HashMap::new(),
            cap: plan.cfg.l2_bytes,
            used: 0,
            peak: 0,
        },
        stats: ExecStats::default(),
    };
    let mut arena = L1Arena::new(plan.cfg.l1_bytes);
    let x_id = plan
        .buffer_id(BufName::X)
        .ok_or_else(|| Error::InvalidPlan("plan has no input buffer".into()))?;
    let out_id = plan
        .buffer_id(BufName::Out)
        .ok_or_else(|| Error::InvalidPlan("plan has no output buffer".into()))?;
    let mut out = None;
    for (i, step) in plan.steps.iter().enumerate() {
        for &b in &step.allocs {
            let buf = &plan.buffers[b];
            ctx.l2.alloc(b, buf.bytes, !buf.name.is_weight())?;
            if b == x_id {
                ctx.l2.data.insert(b, x.data().to_vec());
            }
        }
        ctx.run_step(i, step, &mut arena)?;
        if step.outputs.contains(&out_id) {
            out = ctx.l2.data.get(&out_id).cloned();
        }
        for &b in &step.frees {
            ctx.l2.free(b);
        }
        ctx.stats.steps += 1;
    }
    let data = out.ok_or_else(|| Error::InvalidPlan("plan never produced the output".into()))?;
    let mut stats = ctx.stats;
    stats.peak_l1 = arena.peak();
    stats.peak_l2 = ctx.l2.peak;
    let t = QuantTensor::from_data(data, &[block.dims.s, block.dims.e], Layout::Se, block.out.out_exp)?;
    Ok((t, stats))
}

// ---------------------------------------------------------------------------
// multi-worker execution

/// Contiguous chunk of `0..n` owned by `worker`: `C = ceil(n / workers)`,
/// `start = min(C * worker, n)`, `end = min(start + C, n)`.
pub fn chunk_range(n: usize, workers: usize, worker: usize) -> Range<usize> {
    let c = n.div_ceil(workers.max(1));
    let start = (c * worker).min(n);
    start..(start + c).min(n)
}

/// Run `work(range, buf)` for every worker on its own zeroed buffer, then
/// keep from each buffer only the elements whose owner index falls in its
/// range.
fn parallel_layer<W, O>(
    stats: &mut ExecStats,
    kernel: KernelId,
    axis: &str,
    n: usize,
    workers: usize,
    len: usize,
    owner: O,
    work: W,
) -> Vec<i8>
where
    W: Fn(Range<usize>, &mut [i8]) + Sync,
    O: Fn(usize) -> usize,
{
    let ranges: Vec<Range<usize>> = (0..workers).map(|w| chunk_range(n, workers, w)).collect();
    let bufs: Vec<Vec<i8>> = std::thread::scope(|sc| {
        let handles: Vec<_> = ranges
            .iter()
            .cloned()
            .map(|r| {
                let work = &work;
                sc.spawn(move || {
                    let mut b = vec![0i8; len];
                    if !r.is_empty() {
                        work(r, &mut b);
                    }
                    b
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = vec![0i8; len];
    // merge in worker order
    for (r, b) in ranges.iter().zip(&bufs) {
        for (idx, slot) in out.iter_mut().enumerate() {
            if r.contains(&owner(idx)) {
                *slot = b[idx];
            }
        }
    }
    for (w, r) in ranges.into_iter().enumerate() {
        stats.worker_slices.push(WorkerSlice {
            kernel,
            worker: w,
            axis: axis.into(),
            start: r.start,
            end: r.end,
        });
    }
    out
}

/// Split every layer over `workers`: heads for projections and the
/// attention GEMMs, rows for the output projection. Bit-identical to one
/// worker.
pub fn run_parallel(block: &AttentionBlock, x: &QuantTensor, workers: usize) -> Result<(QuantTensor, ExecStats)> {
    check_input(block, x)?;
    if workers == 0 {
        return Err(Error::InvalidConfig("workers must be >= 1".into()));
    }
    let d = block.dims;
    let AttnDims { s, e, p, h } = d;
    let xd = x.data();
    let mut stats = ExecStats::default();
    let proj_shape = LinearShape {
        heads: h,
        rows: s,
        feats: p,
        red: e,
    };
    let hsp_owner = |i: usize| i / (s * p);
    let shs_owner = |i: usize| (i / s) % h;
    let a = match &block.scores {
        ScorePath::Mhsa { q, k, score } => {
            let proj = |kernel, w: &LinearWeights, stats: &mut ExecStats| {
                parallel_layer(stats, kernel, "H", h, workers, h * s * p, hsp_owner, |hr, buf| {
                    linear_core(xd, w.w.data(), &w.rp, proj_shape, OutOrder::RowMajor, hr, 0..s, buf)
                })
            };
            let qd = proj(KernelId::LinearQ, q, &mut stats);
            let kd = proj(KernelId::LinearK, k, &mut stats);
            let shape = ScoreShape {
                heads: h,
                rows_q: s,
                rows_k: s,
                red: p,
                shared_k: false,
            };
            parallel_layer(&mut stats, KernelId::Gemm1Softmax, "H", h, workers, s * h * s, shs_owner, |hr, buf| {
                score_core(&qd, &kd, score, shape, hr, 0..s, buf)
            })
        }
        ScorePath::Fwsa(fw) => {
            let shape = ScoreShape {
                heads: h,
                rows_q: s,
                rows_k: s,
                red: e,
                shared_k: true,
            };
            let lshape = LinearShape {
                heads: h,
                rows: s,
                feats: e,
                red: e,
            };
            parallel_layer(&mut stats, KernelId::Fwsa, "H", h, workers, s * h * s, shs_owner, |hr, buf| {
                let mut m2 = vec![0i8; h * s * e];
                linear_core(xd, fw.w_star.data(), &fw.rp, lshape, OutOrder::RowMajor, hr.clone(), 0..s, &mut m2);
                score_core(&m2, xd, &fw.score, shape, hr, 0..s, buf)
            })
        }
    };
    let v = parallel_layer(&mut stats, KernelId::LinearV, "H", h, workers, h * p * s, |i| i / (p * s), |hr, buf| {
        linear_core(xd, block.v.w.data(), &block.v.rp, proj_shape, OutOrder::FeatMajor, hr, 0..s, buf)
    });
    let m1 = parallel_layer(&mut stats, KernelId::Gemm2, "H", h, workers, s * h * p, |i| (i / p) % h, |hr, buf| {
        m2_core(&a, &v, &block.m1_rp, h, s, s, p, hr, 0..s, buf)
    });
    let out_shape = LinearShape {
        heads: 1,
        rows: s,
        feats: e,
        red: d.hp(),
    };
    let out = parallel_layer(&mut stats, KernelId::LinearOut, "S", s, workers, s * e, |i| i / e, |rr, buf| {
        linear_core(&m1, block.out.w.data(), &block.out.rp, out_shape, OutOrder::RowMajor, 0..1, rr, buf)
    });
    for (k, n) in layer_macs(block) {
        stats.add_macs(k, n);
        stats.steps += 1;
    }
    let t = QuantTensor::from_data(out, &[s, e], Layout::Se, block.out.out_exp)?;
    Ok((t, stats))
}

// ---------------------------------------------------------------------------
// analytic cost model

/// Parameters of the trend-only cycle model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// MACs per cycle at full utilization.
    pub simd_width: usize,
    /// Per-dot-product loop overhead, in reduction-element equivalents.
    pub reduction_overhead: f64,
    pub softmax_cycles_per_elem: f64,
    pub dma_bytes_per_cycle: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            simd_width: 4,
            reduction_overhead: 8.0,
            softmax_cycles_per_elem: 12.0,
            dma_bytes_per_cycle: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub macs: u64,
    pub compute_cycles: f64,
    pub softmax_cycles: f64,
    /// Transfer time not hidden behind compute.
    pub stall_cycles: f64,
    pub total_cycles: f64,
}

impl CostEstimate {
    pub fn macs_per_cycle(&self) -> f64 {
        if self.total_cycles == 0.0 {
            0.0
        } else {
            self.macs as f64 / self.total_cycles
        }
    }

    pub fn softmax_share(&self) -> f64 {
        if self.total_cycles == 0.0 {
            0.0
        } else {
            self.softmax_cycles / self.total_cycles
        }
    }
}

/// Cycle estimate of a plan: MACs over `simd_width * utilization(red)`
/// with `utilization(k) = k / (k + overhead)`, softmax linear in the
/// number of normalized elements, and transfers only where they exceed
/// the step's compute. A trend model, not a cycle-accurate one.
pub fn cost_estimate(plan: &TilingPlan, model: &CostModel) -> CostEstimate {
    let AttnDims { s, e, p, .. } = plan.dims;
    let util = |k: usize| k as f64 / (k as f64 + model.reduction_overhead);
    let lanes = model.simd_width.max(1) as f64;
    let mut est = CostEstimate::default();
    for st in &plan.steps {
        let m = st.macs as f64;
        // (fraction of MACs, reduction length)
        let parts: Vec<(f64, usize)> = match st.kernel {
            KernelId::LinearQ | KernelId::LinearK | KernelId::LinearV => vec![(1.0, e)],
            KernelId::Gemm1Softmax => vec![(1.0, p)],
            KernelId::Gemm2 => vec![(1.0, s)],
            KernelId::LinearOut => vec![(1.0, plan.dims.hp())],
            KernelId::Fwsa => vec![(1.0, e)],
            KernelId::DftHead => vec![(0.5, p), (0.5, s)],
            KernelId::DftFwsaHead => {
                let f = ((e * e + s * e) as f64) / ((e * e + s * e + s * p) as f64);
                vec![(f, e), (1.0 - f, s)]
            }
        };
        let compute: f64 = parts.iter().map(|&(f, k)| f * m / (lanes * util(k))).sum();
        let softmax = st.softmax_elems as f64 * model.softmax_cycles_per_elem;
        let transfer = (st.bytes_in + st.bytes_out) as f64 / model.dma_bytes_per_cycle;
        let stall = (transfer - compute - softmax).max(0.0);
        est.macs += st.macs;
        est.compute_cycles += compute;
        est.softmax_cycles += softmax;
        est.stall_cycles += stall;
    }
    est.total_cycles = est.compute_cycles + est.softmax_cycles + est.stall_cycles;
    est
}

/// Layer-wise transfer check helper: bytes a step must at least read.
pub fn step_input_bytes(plan: &TilingPlan, step: &Step) -> usize {
    step.inputs.iter().map(|&b| plan.buffers[b].bytes).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking_rule() {
        let sizes: Vec<usize> = (0..3).map(|w| chunk_range(8, 3, w).len()).collect();
        assert_eq!(sizes, vec![3, 3, 2]);
        assert_eq!(chunk_range(8, 8, 7), 7..8);
        assert_eq!(chunk_range(2, 4, 3), 2..2);
    }

    #[test]
    fn dft_simulation_matches_formula_small() {
        let d = AttnDims::new(7, 3, 2, 1).unwrap();
        for x in 1..=7 {
            assert_eq!(
                simulate_dft_head_l1(KernelId::DftHead, d, x).unwrap(),
                crate::planner::mem_dft(x, d).unwrap()
            );
        }
    }

    #[test]
    fn arena_reports_violation() {
        let mut a = L1Arena::new(10);
        a.alloc(6).unwrap();
        assert!(matches!(a.alloc(5), Err(Error::WorkingSetViolation { used: 11, .. })));
    }
}
