//! `tiny-mhsa`: verify, plan, fuse and benchmark quantized attention blocks.
//!
//! Exit codes: 0 pass, 1 verification failure, 2 input error.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tiny_mhsa::exec::{cost_estimate, run_parallel, run_tiled, run_untiled, CostModel};
use tiny_mhsa::fusion::AttnCostReport;
use tiny_mhsa::kernels::SOFTMAX_OUT_EXP;
use tiny_mhsa::model::{
    fuse_model, quantize_block, random_float_input, sample_input, synthetic_model, ModelContainer, PlatformConfig,
    CALIBRATION_INPUTS,
};
use tiny_mhsa::oracle::{float_fwsa, float_mhsa, naive_block};
use tiny_mhsa::planner::{kb, plan_auto, plan_dft, plan_lwt, MemConfig, ModeRequest, TilingPlan};
use tiny_mhsa::{AttentionBlock, AttnDims, Error, Flavor};

use report::{digest, Report};

const BUILTINS: [(&str, &str); 3] = [
    ("eeg", include_str!("../../../models/eeg.model")),
    ("ecg", include_str!("../../../models/ecg.model")),
    ("tr", include_str!("../../../models/tr.model")),
];

#[derive(Parser)]
#[command(name = "tiny-mhsa", version, about = "Int8 attention kernels, tiling planner and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Model container path, or `builtin:eeg|ecg|tr`.
    #[arg(long)]
    model: Option<String>,
    /// Platform file with `key = value` lines; defaults to the 128 KB L1 cluster.
    #[arg(long)]
    platform: Option<PathBuf>,
    /// Policy overrides, e.g. `weights_resident=false,residual_live=true`.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the key-value report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the oracle-equivalence suite on a model.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Worker count for the parallel check; all of 1,2,3,4,8 when omitted.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the tiling schedule and L2 memory timeline.
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ModeArg::Auto)]
        mode: ModeArg,
    },
    /// Fuse the Q/K projections of a model into W* and report the cost change.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Output path for the fused container.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare {MHSA, FWSA} x {LWT, DFT} on one or more models.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Extra models; the three builtins are used when none is given.
        #[arg(long = "also")]
        also: Vec<String>,
        #[arg(long)]
        workers: Option<usize>,
        /// Inputs per configuration.
        #[arg(long, default_value_t = 3)]
        inputs: u64,
    },
    /// Write a seeded synthetic model container.
    Generate {
        #[arg(long)]
        dims: String,
        #[arg(long, value_enum, default_value_t = FlavorArg::Mhsa)]
        flavor: FlavorArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Lwt,
    Dft,
    Auto,
}

impl From<ModeArg> for ModeRequest {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lwt => ModeRequest::Lwt,
            ModeArg::Dft => ModeRequest::Dft,
            ModeArg::Auto => ModeRequest::Auto,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FlavorArg {
    Mhsa,
    Fwsa,
}

/// Failures that are the caller's input, as opposed to a failed check.
#[derive(Debug)]
struct InputError(anyhow::Error);

fn input<T>(r: Result<T>) -> std::result::Result<T, InputError> {
    r.map_err(InputError)
}

fn load_model(spec: &str) -> Result<(String, ModelContainer)> {
    if let Some(name) = spec.strip_prefix("builtin:") {
        let (n, text) = BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| anyhow!("unknown builtin model `{name}` (eeg, ecg, tr)"))?;
        return Ok((n.to_string(), ModelContainer::parse(text)?));
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m = ModelContainer::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let name = path.file_stem().map_or(spec.to_string(), |s| s.to_string_lossy().into_owned());
    Ok((name, m))
}

fn load_platform(c: &Common) -> Result<PlatformConfig> {
    let mut p = match &c.platform {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PlatformConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PlatformConfig::default(),
    };
    if let Some(pol) = &c.policy {
        p.apply_policy(pol)?;
    }
    p.validate()?;
    Ok(p)
}

fn require_model(c: &Common) -> Result<(String, ModelContainer)> {
    load_model(c.model.as_deref().ok_or_else(|| anyhow!("--model is required"))?)
}

fn put_platform(r: &mut Report, p: &PlatformConfig) {
    let m = &p.mem;
    r.put("platform.l1_bytes", m.l1_bytes);
    r.put("platform.l2_bytes", m.l2_bytes);
    r.put("platform.cores", m.cores);
    r.put("platform.simd_width", p.simd_width);
    r.put("policy.weights_resident", m.weights_resident);
    r.put("policy.residual_live", m.residual_live);
    r.put("policy.count_biases", m.count_biases);
}

fn write_report(c: &Common, r: &Report) -> Result<()> {
    if let Some(path) = &c.report {
        std::fs::write(path, r.render()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn build_plan(dims: AttnDims, flavor: Flavor, mem: &MemConfig, mode: ModeRequest) -> Result<(TilingPlan, String)> {
    Ok(match mode {
        ModeRequest::Lwt => (plan_lwt(dims, flavor, mem)?, "requested lwt".into()),
        ModeRequest::Dft => (plan_dft(dims, flavor, mem)?, "requested dft".into()),
        ModeRequest::Auto => plan_auto(dims, flavor, mem)?,
    })
}

// ---------------------------------------------------------------------------
// verify

struct Checks {
    report: Report,
    failed: usize,
}

impl Checks {
    fn record(&mut self, key: &str, ok: bool, detail: impl std::fmt::Display) {
        println!("[{}] {key}: {detail}", if ok { "PASS" } else { "FAIL" });
        self.report.put(format!("check.{key}"), if ok { "pass" } else { "fail" });
        if !ok {
            self.failed += 1;
        }
    }

    fn skip(&mut self, key: &str, why: impl std::fmt::Display) {
        println!("[SKIP] {key}: {why}");
        self.report.put(format!("check.{key}"), "skipped");
    }
}

const VERIFY_INPUTS: u64 = 3;
const VERIFY_WORKERS: [usize; 5] = [1, 2, 3, 4, 8];

fn verify(common: &Common, workers: Option<usize>) -> std::result::Result<bool, InputError> {
    let (name, model) = input(require_model(common))?;
    let plat = input(load_platform(common))?;
    let block = &model.block;
    let dims = block.dims;
    let mut c = Checks {
        report: Report::new("verify"),
        failed: 0,
    };
    c.report.put("model", &name);
    c.report.put("flavor", block.flavor());
    c.report.put("dims", dims);
    c.report.put("seed", common.seed);
    put_platform(&mut c.report, &plat);

    let round = ModelContainer::parse(&model.to_text()).map(|m| m == model).unwrap_or(false);
    c.record("container_roundtrip", round, "emit then parse gives the same model");

    let big = MemConfig::new(1 << 30, 1 << 31, plat.mem.cores).map_err(|e| InputError(e.into()))?;
    let plans: Vec<(&str, std::result::Result<TilingPlan, Error>)> = vec![
        ("lwt", plan_lwt(dims, block.flavor(), &plat.mem)),
        ("dft", plan_dft(dims, block.flavor(), &plat.mem)),
    ];
    let worker_set: Vec<usize> = workers.map_or(VERIFY_WORKERS.to_vec(), |w| vec![w]);

    let mut oracle_ok = true;
    let mut tiled_ok = vec![true; plans.len()];
    let mut par_ok = true;
    let mut rows_ok = true;
    let mut float_err = 0f64;
    let mut float_scale = 0f64;
    for k in 0..VERIFY_INPUTS {
        let (x, xf) = input(sample_input(block, common.seed + k).map_err(Into::into))?;
        let (untiled, _) = input(run_untiled(block, &x, &big).map_err(Into::into))?;
        let trace = input(naive_block(block, &x).map_err(Into::into))?;
        oracle_ok &= trace.out == untiled;
        rows_ok &= trace
            .a
            .data()
            .chunks(dims.s)
            .all(|r| (r.iter().map(|&v| i64::from(v)).sum::<i64>() - 128).abs() <= dims.s as i64);
        for (i, (_, p)) in plans.iter().enumerate() {
            if let Ok(plan) = p {
                tiled_ok[i] &= run_tiled(plan, block, &x).map(|(y, _)| y == untiled).unwrap_or(false);
            }
        }
        for &w in &worker_set {
            par_ok &= run_parallel(block, &x, w).map(|(y, _)| y == untiled).unwrap_or(false);
        }
        if let Some(f) = &model.float {
            let reference = match block.flavor() {
                Flavor::Mhsa => float_mhsa(&xf, f, dims),
                Flavor::Fwsa => tiny_mhsa::fusion::fuse_weights(&f.wq, &f.wk, dims).and_then(|ws| float_fwsa(&xf, &ws, f, dims)),
            };
            if let Ok(r) = reference {
                let got = untiled.dequantize();
                float_err = got.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(float_err, f64::max);
                float_scale = r.iter().map(|v| v.abs()).fold(float_scale, f64::max);
            }
        }
    }
    c.record("untiled_vs_oracle", oracle_ok, format!("{VERIFY_INPUTS} inputs, bit-exact"));
    for (i, (mode, p)) in plans.iter().enumerate() {
        match p {
            Ok(plan) => c.record(
                &format!("{mode}_vs_untiled"),
                tiled_ok[i],
                format!("{} steps, peak L2 {:.1} KB", plan.steps.len(), kb(plan.timeline().peak)),
            ),
            Err(e) => c.skip(&format!("{mode}_vs_untiled"), e),
        }
    }
    c.record(
        "parallel_vs_untiled",
        par_ok,
        format!("workers {}", worker_set.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")),
    );
    c.record("softmax_row_sums", rows_ok, format!("|sum - 128| <= S at scale 2^-{SOFTMAX_OUT_EXP}"));
    if model.float.is_some() {
        // quantization error is informational, not a pass/fail property
        println!("[INFO] float_reference: max abs error {float_err:.4} on outputs up to {float_scale:.4}");
        c.report.put("float.max_abs_error", format!("{float_err:.6}"));
        c.report.put("float.max_abs_output", format!("{float_scale:.6}"));
    }
    c.report.put("failed", c.failed);
    input(write_report(common, &c.report))?;
    Ok(c.failed == 0)
}

// ---------------------------------------------------------------------------
// plan

fn plan(common: &Common, mode: ModeArg) -> Result<()> {
    let (name, model) = require_model(common)?;
    let plat = load_platform(common)?;
    let dims = model.block.dims;
    let flavor = model.block.flavor();
    let (plan, why) = build_plan(dims, flavor, &plat.mem, mode.into())?;
    let tl = plan.timeline();
    print!("{}", plan.render());
    println!("mode {} ({why})", plan.mode);

    let mut r = Report::new("plan");
    r.put("model", &name);
    r.put("flavor", flavor);
    r.put("dims", dims);
    put_platform(&mut r, &plat);
    r.put("mode", plan.mode);
    r.put("rationale", &why);
    if let Some(x) = plan.dft_x {
        r.put("dft_rows", x);
    }
    r.put("steps", plan.steps.len());
    for (i, (st, occ)) in plan.steps.iter().zip(&tl.occupancy).enumerate() {
        let k = match st.head {
            Some(h) => format!("{}[{h}]", st.kernel),
            None => st.kernel.to_string(),
        };
        r.put(format!("step.{i}.kernel"), k);
        r.put(format!("step.{i}.l1_bytes"), st.l1_bytes);
        r.put(format!("step.{i}.l2_bytes"), occ);
    }
    r.put("peak_l2_bytes", tl.peak);
    r.put("peak_l2_kb", format!("{:.1}", kb(tl.peak)));
    r.put("peak_l1_bytes", plan.peak_l1());
    r.put("macs", plan.total_macs());
    // compare against the other mode when it is feasible
    let other = match plan.mode {
        tiny_mhsa::planner::Mode::Lwt => plan_dft(dims, flavor, &plat.mem).ok(),
        tiny_mhsa::planner::Mode::Dft => plan_lwt(dims, flavor, &plat.mem).ok(),
    };
    if let Some(o) = other {
        let op = o.timeline().peak;
        let (lwt, dft) = match plan.mode {
            tiny_mhsa::planner::Mode::Lwt => (tl.peak, op),
            tiny_mhsa::planner::Mode::Dft => (op, tl.peak),
        };
        let factor = lwt as f64 / dft as f64;
        println!("lwt peak {:.1} KB, dft peak {:.1} KB, reduction {factor:.2}x", kb(lwt), kb(dft));
        r.put("lwt_peak_bytes", lwt);
        r.put("dft_peak_bytes", dft);
        r.put("dft_reduction_factor", format!("{factor:.2}"));
    }
    write_report(common, &r)
}

// ---------------------------------------------------------------------------
// fuse

fn put_cost(r: &mut Report, c: &AttnCostReport) {
    r.put("cost.core_macs_mhsa", c.macs_mhsa);
    r.put("cost.core_macs_fwsa", c.macs_fwsa);
    r.put("cost.block_macs_mhsa", c.block_macs_mhsa);
    r.put("cost.block_macs_fwsa", c.block_macs_fwsa);
    r.put("cost.block_mac_reduction_pct", format!("{:.1}", c.block_mac_reduction() * 100.0));
    r.put("cost.core_params_mhsa", c.params_mhsa);
    r.put("cost.core_params_fwsa", c.params_fwsa);
    r.put("cost.block_params_mhsa", c.block_params_mhsa);
    r.put("cost.block_params_fwsa", c.block_params_fwsa);
    r.put("cost.block_param_reduction_pct", format!("{:.1}", c.block_param_reduction() * 100.0));
    r.put("cost.bias_params_mhsa", c.bias_params_mhsa);
    r.put("cost.bias_params_fwsa", c.bias_params_fwsa);
    r.put("cost.op_beneficial", c.op_beneficial);
    r.put("cost.param_beneficial", c.param_beneficial);
}

fn fuse(common: &Common, out: &Path) -> Result<()> {
    let (name, model) = require_model(common)?;
    if model.block.flavor() == Flavor::Fwsa {
        bail!("{name} is already fused");
    }
    let fused = fuse_model(&model, common.seed)?;
    let text = fused.to_text();
    if ModelContainer::parse(&text)? != fused {
        bail!("fused container does not round-trip");
    }
    std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    let cost = AttnCostReport::new(model.block.dims);
    println!("wrote {} ({} flavor)", out.display(), fused.block.flavor());
    println!(
        "block MACs {} -> {} ({:+.1}%), block params {} -> {} ({:+.1}%)",
        cost.block_macs_mhsa,
        cost.block_macs_fwsa,
        -cost.block_mac_reduction() * 100.0,
        cost.block_params_mhsa,
        cost.block_params_fwsa,
        -cost.block_param_reduction() * 100.0
    );
    println!("fusion lowers ops: {}, lowers params: {}", cost.op_beneficial, cost.param_beneficial);
    let mut r = Report::new("fuse");
    r.put("model", &name);
    r.put("dims", model.block.dims);
    r.put("seed", common.seed);
    r.put("output", out.display());
    r.put("wstar_exp", match &fused.block.scores {
        tiny_mhsa::ScorePath::Fwsa(fw) => fw.w_star.scale_exp(),
        tiny_mhsa::ScorePath::Mhsa { .. } => unreachable!("fuse_model returns a fused block"),
    });
    put_cost(&mut r, &cost);
    write_report(common, &r)
}

// ---------------------------------------------------------------------------
// bench

/// The model's block in `flavor`, re-quantizing from float weights when
/// the container holds the other flavor.
fn variant(model: &ModelContainer, flavor: Flavor, seed: u64) -> Result<AttentionBlock> {
    if model.block.flavor() == flavor {
        return Ok(model.block.clone());
    }
    match flavor {
        Flavor::Fwsa => Ok(fuse_model(model, seed)?.block),
        Flavor::Mhsa => {
            let f = model
                .float
                .as_ref()
                .ok_or_else(|| anyhow!("an MHSA variant needs the float weights"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let calib: Vec<Vec<f64>> =
                (0..CALIBRATION_INPUTS).map(|_| random_float_input(model.block.dims, &mut rng)).collect();
            Ok(quantize_block(f, model.block.dims, Flavor::Mhsa, &calib)?)
        }
    }
}

fn bench(common: &Common, also: &[String], workers: Option<usize>, inputs: u64) -> Result<()> {
    let plat = load_platform(common)?;
    let mut specs: Vec<String> = common.model.iter().cloned().chain(also.iter().cloned()).collect();
    if specs.is_empty() {
        specs = BUILTINS.iter().map(|(n, _)| format!("builtin:{n}")).collect();
    }
    let cm = CostModel {
        simd_width: plat.simd_width,
        ..CostModel::default()
    };
    let mut r = Report::new("bench");
    put_platform(&mut r, &plat);
    r.put("seed", common.seed);
    r.put("inputs", inputs);
    let configs = [
        (Flavor::Mhsa, ModeRequest::Lwt),
        (Flavor::Mhsa, ModeRequest::Dft),
        (Flavor::Fwsa, ModeRequest::Lwt),
        (Flavor::Fwsa, ModeRequest::Dft),
    ];
    println!("{:<8} {:>14} {:>14} {:>14} {:>14}   (L2 peak KB / est. cycles)", "model", "MHSA-LWT", "MHSA-DFT", "FWSA-LWT", "FWSA-DFT");
    for spec in &specs {
        let (name, model) = load_model(spec)?;
        let dims = model.block.dims;
        r.put(format!("{name}.dims"), dims);
        let mut cells = Vec::new();
        for (flavor, mode) in configs {
            let key = format!("{name}.{}_{}", flavor.name().to_ascii_lowercase(), mode_name(mode));
            let block = match variant(&model, flavor, common.seed) {
                Ok(b) => b,
                Err(e) => {
                    r.put(format!("{key}.status"), format!("unavailable: {e}"));
                    cells.push("-".to_string());
                    continue;
                }
            };
            let plan = match build_plan(dims, flavor, &plat.mem, mode) {
                Ok((p, _)) => p,
                Err(e) => {
                    r.put(format!("{key}.status"), format!("not applicable: {e}"));
                    cells.push("n/a".to_string());
                    continue;
                }
            };
            let mut outs = Vec::new();
            let mut stats = None;
            for k in 0..inputs {
                let (x, _) = sample_input(&block, common.seed + k)?;
                let (y, st) = run_tiled(&plan, &block, &x)?;
                outs.extend_from_slice(y.data());
                stats = Some(st);
            }
            let est = cost_estimate(&plan, &cm);
            let peak = plan.timeline().peak;
            r.put(format!("{key}.status"), "ok");
            r.put(format!("{key}.steps"), plan.steps.len());
            r.put(format!("{key}.macs"), plan.total_macs());
            if let Some(st) = &stats {
                r.put(format!("{key}.l2_to_l1_bytes"), st.l2_to_l1);
                r.put(format!("{key}.l1_to_l2_bytes"), st.l1_to_l2);
                r.put(format!("{key}.peak_l1_bytes"), st.peak_l1);
            }
            r.put(format!("{key}.peak_l2_bytes"), peak);
            r.put(format!("{key}.est_cycles"), format!("{:.0}", est.total_cycles));
            r.put(format!("{key}.est_macs_per_cycle"), format!("{:.3}", est.macs_per_cycle()));
            r.put(format!("{key}.est_softmax_share"), format!("{:.3}", est.softmax_share()));
            r.put(format!("{key}.output_digest"), digest(&outs));
            cells.push(format!("{:.1}/{:.0}K", kb(peak), est.total_cycles / 1000.0));
        }
        println!("{:<8} {:>14} {:>14} {:>14} {:>14}", name, cells[0], cells[1], cells[2], cells[3]);
        if let Some(w) = workers {
            let (x, _) = sample_input(&model.block, common.seed)?;
            let (y, st) = run_parallel(&model.block, &x, w)?;
            r.put(format!("{name}.parallel.workers"), w);
            r.put(format!("{name}.parallel.output_digest"), digest(y.data()));
            for sl in &st.worker_slices {
                r.put(
                    format!("{name}.parallel.{}.worker{}", sl.kernel, sl.worker),
                    format!("{} {}..{}", sl.axis, sl.start, sl.end),
                );
            }
        }
    }
    write_report(common, &r)
}

fn mode_name(m: ModeRequest) -> &'static str {
    match m {
        ModeRequest::Lwt => "lwt",
        ModeRequest::Dft => "dft",
        ModeRequest::Auto => "auto",
    }
}

// ---------------------------------------------------------------------------

fn generate(dims: &str, flavor: FlavorArg, seed: u64, out: &Path) -> Result<()> {
    let d = match dims.to_ascii_lowercase().as_str() {
        "eeg" => AttnDims::EEG,
        "ecg" => AttnDims::ECG,
        "tr" => AttnDims::TR,
        other => {
            let v: Vec<usize> = other
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| anyhow!("--dims takes eeg, ecg, tr or S,E,P,H"))?;
            if v.len() != 4 {
                bail!("--dims takes eeg, ecg, tr or S,E,P,H");
            }
            AttnDims::new(v[0], v[1], v[2], v[3])?
        }
    };
    let flavor = match flavor {
        FlavorArg::Mhsa => Flavor::Mhsa,
        FlavorArg::Fwsa => Flavor::Fwsa,
    };
    let m = synthetic_model(d, flavor, seed)?;
    std::fs::write(out, m.to_text()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({flavor}, {d}, seed {seed})", out.display());
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<bool, InputError> {
    match cli.cmd {
        Cmd::Verify { common, workers } => verify(&common, workers),
        Cmd::Plan { common, mode } => input(plan(&common, mode)).map(|_| true),
        Cmd::Fuse { common, out } => input(fuse(&common, &out)).map(|_| true),
        Cmd::Bench {
            common,
            also,
            workers,
            inputs,
        } => input(bench(&common, &also, workers, inputs)).map(|_| true),
        Cmd::Generate { dims, flavor, seed, out } => input(generate(&dims, flavor, seed, &out)).map(|_| true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(InputError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
