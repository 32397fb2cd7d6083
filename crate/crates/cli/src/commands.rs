use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use evoshard::autochunk::{autochunk_search, execute_chunked, plan_codegen, Budget, ChunkPlan, ExecutionPlan};
use evoshard::costsched::{
    activation_memory, compare, compare_schedules, dap_volume, example_timeline, simulate_schedule, tp_volume,
    CommModel, EventsFile, Mode, RowK, Timeline, VOLUME_SCHEMA,
};
use evoshard::dap::{
    dap_evoformer_block, predicted_forward_traffic, shard, unshard, Collective, CommLedger, DeviceMesh, Traffic,
};
use evoshard::evoformer::{evoformer_block, random_inputs, BlockParams, EvoConfig};
use evoshard::graphir::{
    estimate_memory_with, execute, footprint_stats, trace_evoformer, Bindings, Graph, MemoryProfile,
};
use evoshard::tensor::Tensor;
use evoshard::Error;

use crate::output::{emit, OutputArgs};

/// Numerical tolerance of every equivalence check.
pub const DIFF_TOL: f64 = 1e-9;
/// Footprint threshold as a fraction of the peak.
pub const FOOTPRINT_THRESHOLD: f64 = 0.2;

#[derive(Debug, Parser)]
#[command(name = "evoshard", version, about = "Memory and communication analysis of an evoformer block")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace one block and report its memory profile.
    Analyze(AnalyzeArgs),
    /// Per-device communication volume of tensor versus axial parallelism.
    Commvolume(CommvolumeArgs),
    /// Run the reference and sharded blocks and compare outputs and traffic.
    Simulate(SimulateArgs),
    /// Search a chunk plan that fits a memory budget.
    Plan(PlanArgs),
    /// Execute a plan file and check memory and numerics.
    RunPlan(RunPlanArgs),
    /// Compare synchronous and overlapped schedules of a timeline.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Dims {
    #[arg(long, default_value_t = 8)]
    pub n_seq: usize,
    #[arg(long)]
    pub n_res: usize,
    #[arg(long, default_value_t = 8)]
    pub h_msa: usize,
    #[arg(long, default_value_t = 4)]
    pub h_pair: usize,
    /// Attention heads in both the MSA and the pair stack.
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden_proj: usize,
    #[arg(long, default_value_t = 4)]
    pub transition_factor: usize,
}

impl Dims {
    fn config(&self) -> Result<EvoConfig> {
        let cfg = EvoConfig {
            n_seq: self.n_seq,
            n_res: self.n_res,
            h_msa: self.h_msa,
            h_pair: self.h_pair,
            n_head_msa: self.heads,
            n_head_pair: self.heads,
            hidden_proj: self.hidden_proj,
            transition_factor: self.transition_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub dims: Dims,
    /// Layers for the attention-activation closed form.
    #[arg(long, default_value_t = 48)]
    pub layers: u64,
    /// Reported bytes per element.
    #[arg(long, default_value_t = 2)]
    pub element_size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also execute the graph and report the measured peak.
    #[arg(long)]
    pub measure: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VolumeMode {
    Both,
    Tp,
    Dap,
}

#[derive(Debug, Args)]
pub struct CommvolumeArgs {
    /// Intermediate activation size K in bytes.
    #[arg(long)]
    pub k: f64,
    #[arg(long)]
    pub devices: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value_t = VolumeMode::Both)]
    pub mode: VolumeMode,
    #[arg(long)]
    pub k_attention: Option<f64>,
    #[arg(long)]
    pub k_opm: Option<f64>,
    #[arg(long)]
    pub k_triangle: Option<f64>,
    #[arg(long)]
    pub k_transpose: Option<f64>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub dims: Dims,
    #[arg(long)]
    pub devices: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub element_size: u64,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
#[group(id = "budget_choice", required = true, multiple = false, args = ["budget", "budget_frac"])]
pub struct PlanArgs {
    #[command(flatten)]
    pub dims: Dims,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Peak budget in reported bytes.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Peak budget as a fraction of the unchunked peak.
    #[arg(long)]
    pub budget_frac: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pub element_size: u64,
    /// Where to write the plan file; printed on stdout when absent.
    #[arg(long)]
    pub out_plan: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct RunPlanArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleMode {
    Both,
    Sync,
    Async,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Events file; the bundled three-event example when absent.
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScheduleMode::Both)]
    pub mode: ScheduleMode,
    /// Print the bundled example as an events file and exit.
    #[arg(long)]
    pub print_example: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

pub enum Outcome {
    Pass,
    CheckFailed,
}

impl From<bool> for Outcome {
    fn from(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::CheckFailed
        }
    }
}

/// Maps library errors to exit codes; anything else is a usage error.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::TpScaling { .. }) => 3,
        Some(Error::Infeasible { .. }) => 4,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Commvolume(a) => commvolume(a),
        Command::Simulate(a) => simulate(a),
        Command::Plan(a) => plan(a),
        Command::RunPlan(a) => run_plan(a),
        Command::Schedule(a) => schedule(a),
    }
}

fn bindings(p: &BlockParams, cfg: &EvoConfig, seed: u64) -> Bindings {
    let (m, z) = random_inputs(cfg, seed);
    Bindings::from_params(p).with("m", m).with("z", z)
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut d = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        d = d.max(x.max_abs_diff(y)?);
    }
    Ok(d)
}

#[derive(Serialize)]
struct AttentionActivation {
    n_res: u64,
    heads: u64,
    layers: u64,
    element_size: u64,
    bytes: u64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    schema: &'static str,
    config: EvoConfig,
    seed: u64,
    graph_nodes: usize,
    profile: MemoryProfile,
    footprint_threshold: f64,
    footprint_fraction: f64,
    measured_peak_bytes: Option<u64>,
    attention_activation: AttentionActivation,
}

fn analyze(a: AnalyzeArgs) -> Result<Outcome> {
    let cfg = a.dims.config()?;
    let p = BlockParams::random(&cfg, a.seed)?;
    let g = trace_evoformer(&cfg, &p)?;
    let profile = estimate_memory_with(&g, None, a.element_size)?;
    let measured_peak_bytes = if a.measure {
        let run = execute(&g, &bindings(&p, &cfg, a.seed))?;
        Some(run.stats.peak_bytes / evoshard::tensor::EXEC_ELEMENT_SIZE * a.element_size)
    } else {
        None
    };
    let ok = measured_peak_bytes.is_none_or(|m| m == profile.peak_bytes);
    let report = AnalyzeReport {
        schema: "evoshard.analyze_report/v1",
        config: cfg,
        seed: a.seed,
        graph_nodes: g.len(),
        footprint_threshold: FOOTPRINT_THRESHOLD,
        footprint_fraction: footprint_stats(&profile, FOOTPRINT_THRESHOLD),
        profile,
        measured_peak_bytes,
        attention_activation: AttentionActivation {
            n_res: cfg.n_res as u64,
            heads: a.dims.heads as u64,
            layers: a.layers,
            element_size: a.element_size,
            bytes: activation_memory(cfg.n_res as u64, a.dims.heads as u64, a.layers, a.element_size),
        },
    };
    emit(&report, &a.out)?;
    Ok(ok.into())
}

fn commvolume(a: CommvolumeArgs) -> Result<Outcome> {
    let mut model = CommModel::new(a.k, a.devices, a.heads)?;
    model.row_k = RowK {
        attention_ff: a.k_attention,
        outer_product_mean: a.k_opm,
        triangle_update: a.k_triangle,
        transpose: a.k_transpose,
    };
    model.validate()?;
    match a.mode {
        VolumeMode::Both => emit(&compare(&model)?, &a.out)?,
        VolumeMode::Tp => {
            #[derive(Serialize)]
            struct Tp {
                schema: &'static str,
                model: CommModel,
                tp_total: f64,
            }
            emit(&Tp { schema: VOLUME_SCHEMA, model, tp_total: tp_volume(&model)? }, &a.out)?
        }
        VolumeMode::Dap => {
            #[derive(Serialize)]
            struct Dap {
                schema: &'static str,
                model: CommModel,
                dap: evoshard::costsched::DapBreakdown,
                dap_total: f64,
            }
            let dap = dap_volume(&model)?;
            emit(&Dap { schema: VOLUME_SCHEMA, model, dap, dap_total: dap.total() }, &a.out)?
        }
    }
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct SimulateReport {
    schema: &'static str,
    config: EvoConfig,
    seed: u64,
    devices: usize,
    max_abs_diff_m: f64,
    max_abs_diff_z: f64,
    tolerance: f64,
    bit_identical: bool,
    ledger: CommLedger,
    /// Forward-only per-device prediction.
    predicted_per_device: BTreeMap<Collective, Traffic>,
    bytes_match_prediction: bool,
    passed: bool,
}

fn simulate(a: SimulateArgs) -> Result<Outcome> {
    let cfg = a.dims.config()?;
    let mesh = DeviceMesh::new(a.devices)?;
    let predicted = predicted_forward_traffic(&cfg, &mesh, a.element_size)?;
    let p = BlockParams::random(&cfg, a.seed)?;
    let (m, z) = random_inputs(&cfg, a.seed);
    let (mr, zr) = evoformer_block(&m, &z, &p)?;
    let mut out = dap_evoformer_block(&shard(&m, 0, &mesh)?, &shard(&z, 0, &mesh)?, &p, &mesh)?;
    if a.element_size != out.ledger.element_size {
        let scale = |t: &mut Traffic| t.bytes = t.bytes / out.ledger.element_size * a.element_size;
        out.ledger.per_device.iter_mut().for_each(|d| d.values_mut().for_each(scale));
        out.ledger.element_size = a.element_size;
    }
    let (md, zd) = (unshard(&out.m)?, unshard(&out.z)?);
    let dm = md.max_abs_diff(&mr)?;
    let dz = zd.max_abs_diff(&zr)?;
    let bytes_match = out.ledger.per_device.iter().all(|d| d == &predicted);
    let passed = dm <= DIFF_TOL && dz <= DIFF_TOL && bytes_match;
    let report = SimulateReport {
        schema: "evoshard.simulate_report/v1",
        config: cfg,
        seed: a.seed,
        devices: a.devices,
        max_abs_diff_m: dm,
        max_abs_diff_z: dz,
        tolerance: DIFF_TOL,
        bit_identical: md.bit_eq(&mr) && zd.bit_eq(&zr),
        ledger: out.ledger,
        predicted_per_device: predicted,
        bytes_match_prediction: bytes_match,
        passed,
    };
    emit(&report, &a.out)?;
    Ok(passed.into())
}

pub const PLAN_FILE_SCHEMA: &str = "evoshard.plan_file/v1";

/// Everything needed to rebuild the graph and check a plan.
#[derive(Debug, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema: String,
    pub config: EvoConfig,
    pub seed: u64,
    pub element_size: u64,
    pub budget_bytes: u64,
    pub unchunked_peak_bytes: u64,
    pub estimated_peak_bytes: u64,
    pub plan: ExecutionPlan,
}

#[derive(Serialize)]
struct PlanReport {
    schema: &'static str,
    config: EvoConfig,
    seed: u64,
    element_size: u64,
    budget_bytes: u64,
    unchunked_peak_bytes: u64,
    estimated_peak_bytes: u64,
    reduction: f64,
    regions: usize,
    plan_path: String,
}

fn traced(cfg: &EvoConfig, seed: u64) -> Result<(BlockParams, Graph)> {
    let p = BlockParams::random(cfg, seed)?;
    let g = trace_evoformer(cfg, &p)?;
    Ok((p, g))
}

fn plan(a: PlanArgs) -> Result<Outcome> {
    let cfg = a.dims.config()?;
    if a.element_size == 0 {
        bail!("element size must be positive");
    }
    let (_, g) = traced(&cfg, a.seed)?;
    let unchunked = estimate_memory_with(&g, None, a.element_size)?.peak_bytes;
    let budget_bytes = match (a.budget, a.budget_frac) {
        (Some(b), _) => b,
        (None, Some(f)) if f > 0.0 && f.is_finite() => (unchunked as f64 * f).floor() as u64,
        (None, Some(f)) => bail!("budget fraction {f} must be positive"),
        (None, None) => unreachable!("clap requires one budget flag"),
    };
    let chunk_plan = autochunk_search(&g, &Budget::with_element_size(budget_bytes, a.element_size))?;
    let estimated = estimate_memory_with(&g, Some(&chunk_plan), a.element_size)?.peak_bytes;
    let file = PlanFile {
        schema: PLAN_FILE_SCHEMA.into(),
        config: cfg,
        seed: a.seed,
        element_size: a.element_size,
        budget_bytes,
        unchunked_peak_bytes: unchunked,
        estimated_peak_bytes: estimated,
        plan: plan_codegen(&g, &chunk_plan)?,
    };
    let text = serde_json::to_string_pretty(&file)?;
    match &a.out_plan {
        None => {
            println!("{text}");
            return Ok(Outcome::Pass);
        }
        Some(path) => fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
    }
    let report = PlanReport {
        schema: "evoshard.plan_report/v1",
        config: cfg,
        seed: a.seed,
        element_size: a.element_size,
        budget_bytes,
        unchunked_peak_bytes: unchunked,
        estimated_peak_bytes: estimated,
        reduction: 1.0 - estimated as f64 / unchunked as f64,
        regions: chunk_plan.regions.len(),
        plan_path: a.out_plan.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
    };
    emit(&report, &a.out)?;
    Ok(Outcome::Pass)
}

#[derive(Serialize)]
struct RunPlanReport {
    schema: &'static str,
    config: EvoConfig,
    seed: u64,
    element_size: u64,
    regions: usize,
    budget_bytes: u64,
    unchunked_peak_bytes: u64,
    estimated_peak_bytes: u64,
    measured_peak_bytes: u64,
    max_abs_diff: f64,
    tolerance: f64,
    bit_identical: bool,
    passed: bool,
}

fn run_plan(a: RunPlanArgs) -> Result<Outcome> {
    let text = fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let file: PlanFile = serde_json::from_str(&text).map_err(Error::from)?;
    if file.schema != PLAN_FILE_SCHEMA {
        return Err(Error::Parse(format!("unexpected schema {}", file.schema)).into());
    }
    file.config.validate()?;
    let (p, g) = traced(&file.config, file.seed)?;
    let chunk_plan: ChunkPlan = file.plan.to_chunk_plan(&g)?;
    let estimate = estimate_memory_with(&g, Some(&chunk_plan), file.element_size)?.peak_bytes;
    let binds = bindings(&p, &file.config, file.seed);
    let reference = execute(&g, &binds)?;
    let chunked = execute_chunked(&g, &chunk_plan, &binds)?;
    let measured = chunked.stats.peak_bytes / evoshard::tensor::EXEC_ELEMENT_SIZE * file.element_size;
    let diff = max_diff(&chunked.outputs, &reference.outputs)?;
    let bit_identical = chunked.outputs.iter().zip(&reference.outputs).all(|(x, y)| x.bit_eq(y));
    let passed = measured <= file.budget_bytes && diff <= DIFF_TOL;
    let report = RunPlanReport {
        schema: "evoshard.run_plan_report/v1",
        config: file.config,
        seed: file.seed,
        element_size: file.element_size,
        regions: chunk_plan.regions.len(),
        budget_bytes: file.budget_bytes,
        unchunked_peak_bytes: reference.stats.peak_bytes / evoshard::tensor::EXEC_ELEMENT_SIZE * file.element_size,
        estimated_peak_bytes: estimate,
        measured_peak_bytes: measured,
        max_abs_diff: diff,
        tolerance: DIFF_TOL,
        bit_identical,
        passed,
    };
    emit(&report, &a.out)?;
    Ok(passed.into())
}

#[derive(Serialize)]
struct SingleSchedule {
    schema: &'static str,
    timeline: Timeline,
}

fn schedule(a: ScheduleArgs) -> Result<Outcome> {
    if a.print_example {
        println!("{}", EventsFile::new(example_timeline()).to_json()?);
        return Ok(Outcome::Pass);
    }
    let events = match &a.timeline {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            EventsFile::from_json(&text)?.events
        }
        None => example_timeline(),
    };
    let single = |mode| -> Result<SingleSchedule> {
        Ok(SingleSchedule { schema: evoshard::costsched::TIMELINE_SCHEMA, timeline: simulate_schedule(&events, mode)? })
    };
    match a.mode {
        ScheduleMode::Both => emit(&compare_schedules(&events)?, &a.out)?,
        ScheduleMode::Sync => emit(&single(Mode::Sync)?, &a.out)?,
        ScheduleMode::Async => emit(&single(Mode::Async)?, &a.out)?,
    }
    Ok(Outcome::Pass)
}
