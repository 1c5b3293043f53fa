use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use meshplan::config::{load_cluster, load_model, load_workload, ClusterSpec, ModelSpec, WorkloadSpec};
use meshplan::error::{Error, Result};
use meshplan::pack::{pack_report, parse_lengths, PackPolicy};
use meshplan::plan::{Offload, ParallelPlan, PlanLimits, Recompute};
use meshplan::report::{metadata, plan_report, simulate_one, RecipeReport};
use meshplan::reshard::{plan_all, verify_round_trip, LayoutSet};
use meshplan::sim::chrome_trace;

#[derive(Parser)]
#[command(name = "meshplan", version, about = "Plan, size and simulate multi-dimensional parallel training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep candidate plans, estimate memory, simulate the ones that fit.
    Plan(PlanArgs),
    /// Simulate a single plan.
    Simulate(SimulateArgs),
    /// Per-rank memory breakdown for a single plan.
    EstimateMemory(SingleArgs),
    /// Pack a list of sample lengths into fixed-size sequences.
    Pack(PackArgs),
    /// Copy plan between two shard layouts.
    Reshard(ReshardArgs),
}

#[derive(Args)]
struct Configs {
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    workload: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RecomputeArg {
    None,
    Full,
}

#[derive(Args)]
struct Toggles {
    #[arg(long, value_enum, default_value = "full")]
    recompute: RecomputeArg,
    #[arg(long)]
    offload_optimizer: bool,
    #[arg(long)]
    offload_activations: bool,
    #[arg(long)]
    async_ulysses: bool,
    #[arg(long)]
    moe_overlap: bool,
    /// Layers gathered ahead of the one computing.
    #[arg(long, default_value_t = 1)]
    prefetch_depth: u32,
    /// Shard dense parameters over dp_shard x sp.
    #[arg(long)]
    fsdp_over_sp: bool,
}

impl Toggles {
    fn template(&self) -> ParallelPlan {
        ParallelPlan {
            recompute: match self.recompute {
                RecomputeArg::None => Recompute::None,
                RecomputeArg::Full => Recompute::Full,
            },
            offload: Offload { optimizer: self.offload_optimizer, activations: self.offload_activations },
            async_ulysses: self.async_ulysses,
            moe_overlap: self.moe_overlap,
            fsdp_prefetch_depth: self.prefetch_depth,
            fsdp_over_sp: self.fsdp_over_sp,
            ..Default::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Md,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    configs: Configs,
    /// Sequence lengths to sweep (overrides the workload's).
    #[arg(long, value_delimiter = ',')]
    seq_len: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    sp: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    ep: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    dp_replicate: Vec<u32>,
    /// Defaults to the workload's micro batch.
    #[arg(long, value_delimiter = ',')]
    micro_batch: Vec<u32>,
    #[command(flatten)]
    toggles: Toggles,
    #[arg(long, value_enum, default_value = "md")]
    format: Format,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Embed the generation time.
    #[arg(long)]
    stamp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SingleArgs {
    #[command(flatten)]
    configs: Configs,
    #[arg(long)]
    seq_len: Option<u64>,
    #[arg(long, default_value_t = 1)]
    sp: u32,
    #[arg(long, default_value_t = 1)]
    ep: u32,
    #[arg(long, default_value_t = 1)]
    dp_replicate: u32,
    #[arg(long)]
    micro_batch: Option<u32>,
    #[command(flatten)]
    toggles: Toggles,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    stamp: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    single: SingleArgs,
    /// Write a chrome-trace event list here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Ffd,
    Arrival,
}

#[derive(Args)]
struct PackArgs {
    /// Newline-separated sample lengths.
    lengths: PathBuf,
    #[arg(long)]
    target: u64,
    #[arg(long, value_enum, default_value = "ffd")]
    policy: PolicyArg,
    /// Also report the batch count of every policy.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReshardArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
    /// Raw parameter bytes to push through the plan and back.
    #[arg(long)]
    verify: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    elem_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io { path: p.display().to_string(), source }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|source| Error::Io { path: "<stdout>".into(), source })
        }
    }
}

fn load(c: &Configs) -> Result<(ClusterSpec, ModelSpec, WorkloadSpec)> {
    let cluster = load_cluster(&c.cluster)?;
    let model = load_model(&c.model)?;
    let workload = load_workload(&c.workload, Some(&model))?;
    Ok((cluster, model, workload))
}

fn render(report: &RecipeReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => report.to_json(),
        Format::Csv => report.to_csv()?,
        Format::Md => report.to_markdown(),
    })
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let (cluster, model, workload) = load(&a.configs)?;
    let workloads: Vec<WorkloadSpec> = if a.seq_len.is_empty() {
        vec![workload.clone()]
    } else {
        let mut lens = a.seq_len.clone();
        lens.sort_unstable();
        lens.dedup();
        lens.into_iter().map(|s| WorkloadSpec { seq_len: s, ..workload.clone() }).collect()
    };
    for w in &workloads {
        w.validate(Some(&model))?;
    }
    let micro = if a.micro_batch.is_empty() { vec![workload.micro_batch as u32] } else { a.micro_batch.clone() };
    let limits = PlanLimits::new(a.sp.clone(), a.ep.clone(), a.dp_replicate.clone(), micro);
    let report = plan_report(&cluster, &model, &workloads, &limits, &a.toggles.template(), a.jobs, a.stamp)?;
    emit(a.out.as_deref(), &render(&report, a.format)?)
}

fn single_plan(a: &SingleArgs, cluster: &ClusterSpec, workload: &WorkloadSpec) -> ParallelPlan {
    let denom = a.dp_replicate.max(1) * a.sp.max(1);
    ParallelPlan {
        dp_replicate: a.dp_replicate,
        dp_shard: (cluster.world_size() / denom).max(1),
        sp: a.sp,
        ep: a.ep,
        micro_batch: a.micro_batch.unwrap_or(workload.micro_batch as u32),
        ..a.toggles.template()
    }
}

fn load_single(a: &SingleArgs) -> Result<(ClusterSpec, ModelSpec, WorkloadSpec, ParallelPlan)> {
    let (cluster, model, mut workload) = load(&a.configs)?;
    if let Some(s) = a.seq_len {
        workload.seq_len = s;
        workload.validate(Some(&model))?;
    }
    let plan = single_plan(a, &cluster, &workload);
    Ok((cluster, model, workload, plan))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let s = &a.single;
    let (cluster, model, workload, plan) = load_single(s)?;
    let (row, timeline) = simulate_one(&plan, &model, &cluster, &workload, a.trace.is_some())?;
    if let (Some(path), Some(t)) = (&a.trace, &timeline) {
        let text = serde_json::to_string(&chrome_trace(t)).expect("trace serializes");
        std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    }
    let report = RecipeReport {
        metadata: metadata(&cluster, &model, std::slice::from_ref(&workload), s.stamp),
        rows: vec![row],
        rejected: Vec::new(),
    };
    emit(s.out.as_deref(), &render(&report, s.format)?)
}

fn cmd_estimate_memory(a: &SingleArgs) -> Result<()> {
    let (cluster, model, workload, plan) = load_single(a)?;
    let v = meshplan::plan::validate(&plan, &cluster, &model, &workload);
    if !v.is_empty() {
        return Err(Error::PlanInvalid(v));
    }
    let mem = meshplan::memory::estimate(&plan, &model, &cluster, &workload);
    let fits = meshplan::memory::fits(&mem, &cluster.gpu);
    let text = match a.format {
        Format::Json => {
            let value = serde_json::json!({
                "method": plan.label(),
                "seq_len": workload.seq_len,
                "plan": plan,
                "memory": mem,
                "total_gib": mem.total_gib(),
                "hbm_bytes": cluster.gpu.hbm_bytes,
                "fits": fits,
            });
            serde_json::to_string_pretty(&value).expect("json") + "\n"
        }
        Format::Csv => {
            let mut s = String::from("component,bytes\n");
            for (k, v) in mem.components() {
                s.push_str(&format!("{k},{v}\n"));
            }
            s.push_str(&format!("total,{}\n", mem.total));
            s
        }
        Format::Md => {
            let mut s = String::from("| Component | Bytes | GiB |\n|---|---:|---:|\n");
            for (k, v) in mem.components() {
                s.push_str(&format!("| {k} | {v} | {:.3} |\n", v as f64 / (1u64 << 30) as f64));
            }
            s.push_str(&format!("| total | {} | {:.3} |\n", mem.total, mem.total_gib()));
            s.push_str(&format!("\n{} at {}: {}\n", plan.label(), workload.seq_len, if fits { "fits" } else { "OOM" }));
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

fn cmd_pack(a: &PackArgs) -> Result<()> {
    let bytes = read(&a.lengths)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Pack(format!("{} is not utf-8 text", a.lengths.display())))?;
    if a.target == 0 {
        return Err(Error::Pack("target length must be >= 1".into()));
    }
    let samples = parse_lengths(&text, a.target)?;
    let policy = match a.policy {
        PolicyArg::Ffd => PackPolicy::FirstFitDecreasing,
        PolicyArg::Arrival => PackPolicy::FirstFitArrival,
    };
    let report = pack_report(&samples, a.target, policy, a.compare)?;
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&report).expect("json") + "\n"))
}

fn load_layouts(path: &Path) -> Result<LayoutSet> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Reshard(format!("{}: {e}", path.display())))
}

fn cmd_reshard(a: &ReshardArgs) -> Result<()> {
    let plans = plan_all(&load_layouts(&a.src)?, &load_layouts(&a.dst)?)?;
    if let Some(data) = &a.verify {
        verify_round_trip(&plans, &read(data)?, a.elem_size)?;
    }
    let value = serde_json::json!({ "plans": plans });
    emit(a.out.as_deref(), &(serde_json::to_string_pretty(&value).expect("json") + "\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::EstimateMemory(a) => cmd_estimate_memory(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Reshard(a) => cmd_reshard(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::PlanInvalid(v) => {
                    eprintln!("error: plan invalid");
                    for x in v {
                        eprintln!("  [{}] {}", x.code.as_str(), x.message);
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
