//! `moesim` — trace generation, matrix decomposition, and makespan
//! simulation for MoE all-to-all traffic over a circuit-switched fabric.
//!
//! Exit codes: 0 success, 1 simulation error, 2 input error.

mod config;
mod runner;

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use moesim_core::costmodel::{load_profile, ComputeModel, NetworkModel};
use moesim_core::decompose::{
    bvn_schedule, greedy_maxweight, order_schedule, OrderPolicy, Schedule, TimingModels,
};
use moesim_core::simulator::{run_matrix_suite, SimReport};
use moesim_core::sinkhorn::SinkhornParams;
use moesim_core::traffic::{
    build_matrix, gen_synthetic, load_placement, load_trace, read_matrix_csv, write_trace,
    ExpertPlacement, SynthParams, TraceFormat, TrafficMatrix,
};

#[derive(Debug)]
pub enum CliError {
    /// Bad files, flags, or configuration (exit code 2).
    Input(String),
    /// The pipeline itself failed: normalization, decomposition, or the
    /// simulator rejected the run (exit code 1).
    Simulation(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Simulation(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Simulation(_) => 1,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "moesim",
    version,
    about = "Schedule MoE all-to-all traffic over a reconfigurable circuit fabric and measure makespan"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic routing trace file
    Gen(GenArgs),
    /// Decompose a traffic matrix CSV into a schedule JSON
    Decompose(DecomposeArgs),
    /// Run a sweep experiment described by a config file
    Simulate(SimulateArgs),
    /// Run all six strategies on one matrix or trace and print summary rows
    Suite(SuiteArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Trace file to write (moetrace v1 format)
    #[arg(long)]
    output: PathBuf,
    /// Parameter preset: small-batch or large-batch
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_ranks: Option<usize>,
    #[arg(long)]
    n_experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    tokens_per_rank: Option<usize>,
    /// Zipf exponent over expert ids (0 = uniform)
    #[arg(long)]
    skew: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Compute model: knee, linear, or table
    #[arg(long, default_value = "knee")]
    compute: String,
    #[arg(long, default_value_t = 250.0)]
    compute_floor_us: f64,
    #[arg(long, default_value_t = 256)]
    compute_knee_tokens: u64,
    /// Seconds-per-token slope in microseconds (linear model)
    #[arg(long)]
    compute_per_token_us: Option<f64>,
    /// Profiling CSV (`batch,seconds`) for the table model
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    bandwidth_gbps: f64,
    #[arg(long, default_value_t = 8192.0)]
    bytes_per_token: f64,
    #[arg(long, default_value_t = 10.0)]
    reconfig_delay_ns: f64,
}

impl ModelArgs {
    fn compute_model(&self) -> Result<ComputeModel, CliError> {
        match self.compute.as_str() {
            "knee" => ComputeModel::knee(self.compute_floor_us * 1e-6, self.compute_knee_tokens)
                .map_err(|e| CliError::Input(e.to_string())),
            "linear" => {
                let per_token_us = self.compute_per_token_us.unwrap_or(250.0 / 256.0);
                ComputeModel::linear(per_token_us * 1e-6).map_err(|e| CliError::Input(e.to_string()))
            }
            "table" => {
                let path = self.profile.as_ref().ok_or_else(|| {
                    CliError::Input("--profile is required with --compute table".into())
                })?;
                load_profile(path).map_err(|e| CliError::Input(e.to_string()))
            }
            other => Err(CliError::Input(format!(
                "--compute: expected knee, linear or table, found `{other}`"
            ))),
        }
    }

    fn network(&self) -> NetworkModel {
        NetworkModel {
            bandwidth: self.bandwidth_gbps * 1e9,
            bytes_per_token: self.bytes_per_token,
            reconfig_delay: self.reconfig_delay_ns * 1e-9,
        }
    }

    fn render(&self) -> String {
        format!(
            "compute = {}\ncompute_floor_us = {}\ncompute_knee_tokens = {}\ncompute_per_token_us = {:?}\nprofile = {:?}\nbandwidth_gbps = {}\nbytes_per_token = {}\nreconfig_delay_ns = {}\n",
            self.compute,
            self.compute_floor_us,
            self.compute_knee_tokens,
            self.compute_per_token_us,
            self.profile,
            self.bandwidth_gbps,
            self.bytes_per_token,
            self.reconfig_delay_ns,
        )
    }
}

#[derive(Args)]
struct DecomposeArgs {
    /// Traffic matrix CSV (n rows of n comma-separated integers)
    #[arg(long)]
    matrix: PathBuf,
    /// Decomposition method: bvn or maxweight
    #[arg(long)]
    method: String,
    /// Schedule JSON to write
    #[arg(long, default_value = "schedule.json")]
    output: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    coeff_floor: f64,
    #[arg(long, default_value_t = 1e-6)]
    sinkhorn_tolerance: f64,
    #[arg(long, default_value_t = 10_000)]
    sinkhorn_max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    sinkhorn_epsilon_rel: f64,
    /// Matching order: as_produced, weight_desc, weight_asc, johnson2
    #[arg(long, default_value = "as_produced")]
    ordering: String,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config file (moesim-config v1)
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// Traffic matrix CSV
    #[arg(long, conflicts_with = "trace")]
    matrix: Option<PathBuf>,
    /// Routing trace file (moetrace v1)
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Placement file; defaults to round-robin
    #[arg(long, requires = "trace")]
    placement: Option<PathBuf>,
    /// CSV output path; stdout when omitted
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    models: ModelArgs,
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let mut params = match args.preset.as_deref() {
        None => SynthParams::small_batch(args.seed),
        Some("small-batch") => SynthParams::small_batch(args.seed),
        Some("large-batch") => SynthParams::large_batch(args.seed),
        Some(other) => {
            return Err(CliError::Input(format!(
                "--preset: expected small-batch or large-batch, found `{other}`"
            )))
        }
    };
    if let Some(v) = args.n_ranks {
        params.n_ranks = v;
    }
    if let Some(v) = args.n_experts {
        params.n_experts = v;
    }
    if let Some(v) = args.top_k {
        params.top_k = v;
    }
    if let Some(v) = args.tokens_per_rank {
        params.tokens_per_rank = v;
    }
    if let Some(v) = args.skew {
        params.skew = v;
    }
    let trace = gen_synthetic(&params).map_err(|e| CliError::Input(e.to_string()))?;
    write_trace(&args.output, &trace).map_err(|e| CliError::Input(e.to_string()))?;
    println!(
        "wrote {} tokens ({} ranks, {} experts, top-{}) to {}",
        trace.n_tokens(),
        trace.n_ranks(),
        trace.n_experts(),
        trace.top_k(),
        args.output.display()
    );
    Ok(())
}

fn cmd_decompose(args: &DecomposeArgs) -> Result<(), CliError> {
    let m = read_matrix_csv(&args.matrix).map_err(|e| CliError::Input(e.to_string()))?;
    let policy: OrderPolicy = args
        .ordering
        .parse()
        .map_err(|e: String| CliError::Input(format!("--ordering: {e}")))?;
    let schedule: Schedule = match args.method.as_str() {
        "bvn" => {
            let params = SinkhornParams {
                tolerance: args.sinkhorn_tolerance,
                max_iters: args.sinkhorn_max_iters,
                epsilon_rel: args.sinkhorn_epsilon_rel,
            };
            bvn_schedule(&m, &params, args.coeff_floor)
                .map_err(|e| CliError::Simulation(e.to_string()))?
        }
        "maxweight" => greedy_maxweight(&m),
        other => {
            return Err(CliError::Input(format!(
                "--method: expected bvn or maxweight, found `{other}`"
            )))
        }
    };
    let compute = args.models.compute_model()?;
    let net = args.models.network();
    let schedule = order_schedule(
        schedule,
        policy,
        Some(TimingModels {
            compute: &compute,
            net: &net,
        }),
    )
    .map_err(|e| CliError::Simulation(e.to_string()))?;

    let cleanup = schedule.matchings().iter().filter(|m| m.is_cleanup()).count();
    println!(
        "matchings: {} (source {}, {} cleanup)",
        schedule.len(),
        schedule.source(),
        cleanup
    );
    let coefficients: Vec<f64> = schedule
        .matchings()
        .iter()
        .filter_map(|m| m.coefficient())
        .collect();
    if !coefficients.is_empty() {
        let sum: f64 = coefficients.iter().sum();
        let min = coefficients.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = coefficients.iter().cloned().fold(0.0f64, f64::max);
        println!(
            "coefficients: {} peels, sum {:.4}, min {:.4}, max {:.4}",
            coefficients.len(),
            sum,
            min,
            max
        );
        let bucket = 0.05;
        let mut histogram = std::collections::BTreeMap::new();
        for c in &coefficients {
            *histogram.entry((c / bucket).floor() as usize).or_insert(0u32) += 1;
        }
        for (slot, count) in histogram {
            println!(
                "  [{:.2},{:.2}): {count}",
                slot as f64 * bucket,
                (slot + 1) as f64 * bucket
            );
        }
    }
    for (i, matching) in schedule.matchings().iter().enumerate() {
        let tag = match matching.coefficient() {
            Some(c) => format!("lambda {c:.4}"),
            None if matching.is_cleanup() => "cleanup".into(),
            None => "maxweight".into(),
        };
        println!("matching {i:3}: {:7} tokens ({tag})", matching.total_tokens());
    }
    let json = schedule.to_json().map_err(|e| CliError::Simulation(e.to_string()))?;
    std::fs::write(&args.output, json)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", args.output.display())))?;
    println!("schedule written to {}", args.output.display());
    Ok(())
}

fn cmd_suite(args: &SuiteArgs) -> Result<(), CliError> {
    let (m, input_desc): (TrafficMatrix, String) = match (&args.matrix, &args.trace) {
        (Some(path), None) => (
            read_matrix_csv(path).map_err(|e| CliError::Input(e.to_string()))?,
            format!("matrix = {}", path.display()),
        ),
        (None, Some(path)) => {
            let trace =
                load_trace(path, TraceFormat::MoetraceV1).map_err(|e| CliError::Input(e.to_string()))?;
            let placement = match &args.placement {
                Some(p) => load_placement(p).map_err(|e| CliError::Input(e.to_string()))?,
                None => ExpertPlacement::round_robin(trace.n_experts(), trace.n_ranks())
                    .map_err(|e| CliError::Input(e.to_string()))?,
            };
            let placement_desc = match &args.placement {
                Some(p) => p.display().to_string(),
                None => "roundrobin".into(),
            };
            (
                build_matrix(&trace, &placement).map_err(|e| CliError::Input(e.to_string()))?,
                format!("trace = {}\nplacement = {placement_desc}", path.display()),
            )
        }
        _ => {
            return Err(CliError::Input(
                "exactly one of --matrix or --trace is required".into(),
            ))
        }
    };
    let compute = args.models.compute_model()?;
    let net = args.models.network();
    let resolved = format!("{input_desc}\n{}", args.models.render());
    let hash = sha256_hex(resolved.as_bytes());
    let reports =
        run_matrix_suite(&m, &compute, &net).map_err(|e| CliError::Simulation(e.to_string()))?;
    let mut csv = format!("{},config_hash\n", SimReport::CSV_HEADER);
    for (_, report) in &reports {
        csv.push_str(&format!("{},{hash}\n", report.summary_csv_row()));
    }
    match &args.output {
        Some(path) => {
            std::fs::write(path, csv)
                .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
            println!("wrote {} rows to {}", reports.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let config = config::parse_config(&args.config)?;
    let summary = runner::run_experiment(&config)?;
    println!(
        "wrote {} rows to {} (config hash {})",
        summary.rows_written,
        summary.results_path.display(),
        summary.config_hash
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Decompose(args) => cmd_decompose(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Suite(args) => cmd_suite(args),
    }
}

fn main() {
    // terminate quietly when stdout closes early (e.g. piped into `head`)
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
