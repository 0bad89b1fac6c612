//! Sweep execution for `moesim simulate`.
//!
//! Sweep points are independent, so they fan out across worker threads
//! (capped by MOESIM_THREADS); outputs are collected by point index and
//! written in sweep order, keeping results byte-deterministic regardless of
//! completion order.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use moesim_core::decompose::{bvn_schedule, greedy_maxweight, order_schedule, Schedule, TimingModels};
use moesim_core::simulator::{simulate, SimReport, Strategy};
use moesim_core::traffic::{
    build_matrix, gen_synthetic, load_placement, load_trace, ExpertPlacement, RoutingTrace,
    SynthParams, TraceFormat, TrafficMatrix,
};

use crate::config::{ExperimentConfig, PlacementSource, TraceSource};
use crate::{sha256_hex, CliError};

#[derive(Debug, Clone, PartialEq)]
struct SweepPoint {
    tokens_per_rank: Option<usize>,
    skew: Option<f64>,
    seed: Option<u64>,
    reconfig_delay_ns: f64,
}

impl SweepPoint {
    fn csv_prefix(&self) -> String {
        let opt_usize = |v: Option<usize>| v.map_or("-".into(), |x| x.to_string());
        format!(
            "{},{},{},{}",
            opt_usize(self.tokens_per_rank),
            self.skew.map_or("-".into(), |x| format!("{x}")),
            self.seed.map_or("-".into(), |x| x.to_string()),
            self.reconfig_delay_ns,
        )
    }

    fn file_stem(&self) -> String {
        match (self.tokens_per_rank, self.skew, self.seed) {
            (Some(t), Some(s), Some(seed)) => {
                format!("tpr{t}_skew{s}_seed{seed}_rc{}ns", self.reconfig_delay_ns)
            }
            _ => format!("trace_rc{}ns", self.reconfig_delay_ns),
        }
    }
}

struct PointOutput {
    rows: Vec<String>,
    timelines: Vec<(String, String)>,
}

pub struct RunSummary {
    pub rows_written: usize,
    pub results_path: PathBuf,
    pub config_hash: String,
}

fn enumerate_points(config: &ExperimentConfig) -> Vec<SweepPoint> {
    let mut points = Vec::new();
    match config.trace {
        TraceSource::Synthetic => {
            for &tpr in &config.tokens_per_rank {
                for &skew in &config.skew {
                    for &seed in &config.seeds {
                        for &rc in &config.reconfig_delay_ns {
                            points.push(SweepPoint {
                                tokens_per_rank: Some(tpr),
                                skew: Some(skew),
                                seed: Some(seed),
                                reconfig_delay_ns: rc,
                            });
                        }
                    }
                }
            }
        }
        TraceSource::File(_) => {
            for &rc in &config.reconfig_delay_ns {
                points.push(SweepPoint {
                    tokens_per_rank: None,
                    skew: None,
                    seed: None,
                    reconfig_delay_ns: rc,
                });
            }
        }
    }
    points
}

fn worker_count(n_points: usize) -> Result<usize, CliError> {
    let cap = match std::env::var("MOESIM_THREADS") {
        Ok(s) => {
            let v: usize = s
                .parse()
                .map_err(|_| CliError::Input(format!("MOESIM_THREADS: invalid value `{s}`")))?;
            if v == 0 {
                return Err(CliError::Input("MOESIM_THREADS must be >= 1".into()));
            }
            v
        }
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(cap.min(n_points).max(1))
}

fn matrix_for_point(
    config: &ExperimentConfig,
    point: &SweepPoint,
    file_trace: &Option<RoutingTrace>,
    placement: &ExpertPlacement,
) -> Result<TrafficMatrix, CliError> {
    let trace = match file_trace {
        Some(t) => t.clone(),
        None => gen_synthetic(&SynthParams {
            n_ranks: config.n_ranks,
            n_experts: config.n_experts,
            top_k: config.top_k,
            tokens_per_rank: point.tokens_per_rank.expect("synthetic point"),
            skew: point.skew.expect("synthetic point"),
            seed: point.seed.expect("synthetic point"),
        })
        .map_err(|e| CliError::Input(e.to_string()))?,
    };
    build_matrix(&trace, placement).map_err(|e| CliError::Input(e.to_string()))
}

fn run_point(
    config: &ExperimentConfig,
    point: &SweepPoint,
    file_trace: &Option<RoutingTrace>,
    placement: &ExpertPlacement,
    hash: &str,
) -> Result<PointOutput, CliError> {
    let m = matrix_for_point(config, point, file_trace, placement)?;
    let net = config.network_for(point.reconfig_delay_ns);
    let models = TimingModels {
        compute: &config.compute,
        net: &net,
    };

    let needs_bvn = config.strategies.iter().any(|s| s.starts_with("bvn"));
    let needs_mw = config.strategies.iter().any(|s| s.starts_with("maxweight"));
    let bvn: Option<Schedule> = if needs_bvn {
        let s = bvn_schedule(&m, &config.sinkhorn, config.coeff_floor)
            .map_err(|e| CliError::Simulation(e.to_string()))?;
        Some(
            order_schedule(s, config.ordering, Some(models))
                .map_err(|e| CliError::Simulation(e.to_string()))?,
        )
    } else {
        None
    };
    let mw: Option<Schedule> = if needs_mw {
        let s = greedy_maxweight(&m);
        Some(
            order_schedule(s, config.ordering, Some(models))
                .map_err(|e| CliError::Simulation(e.to_string()))?,
        )
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut timelines = Vec::new();
    for name in &config.strategies {
        let strategy = match name.as_str() {
            "ring" => Strategy::RingSequential,
            "ideal" => Strategy::Ideal,
            "bvn" => Strategy::Decomposed {
                schedule: bvn.clone().expect("bvn schedule prepared"),
                overlap: false,
            },
            "bvn+overlap" => Strategy::Decomposed {
                schedule: bvn.clone().expect("bvn schedule prepared"),
                overlap: true,
            },
            "maxweight" => Strategy::Decomposed {
                schedule: mw.clone().expect("maxweight schedule prepared"),
                overlap: false,
            },
            "maxweight+overlap" => Strategy::Decomposed {
                schedule: mw.clone().expect("maxweight schedule prepared"),
                overlap: true,
            },
            other => unreachable!("strategy `{other}` validated at config parse"),
        };
        let report: SimReport = simulate(&m, &strategy, &config.compute, &net)
            .map_err(|e| CliError::Simulation(e.to_string()))?;
        rows.push(format!(
            "{},{},{}",
            point.csv_prefix(),
            report.summary_csv_row(),
            hash
        ));
        if config.timelines {
            timelines.push((
                format!("{}_{}.json", point.file_stem(), name),
                report.to_json(),
            ));
        }
    }
    Ok(PointOutput { rows, timelines })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, CliError> {
    let resolved = config.render_resolved();
    let hash = sha256_hex(resolved.as_bytes());

    let file_trace: Option<RoutingTrace> = match &config.trace {
        TraceSource::File(path) => Some(
            load_trace(path, TraceFormat::MoetraceV1)
                .map_err(|e| CliError::Input(e.to_string()))?,
        ),
        TraceSource::Synthetic => None,
    };
    let (n_ranks, n_experts) = match &file_trace {
        Some(t) => (t.n_ranks(), t.n_experts()),
        None => (config.n_ranks, config.n_experts),
    };
    let placement = match &config.placement {
        PlacementSource::RoundRobin => ExpertPlacement::round_robin(n_experts, n_ranks)
            .map_err(|e| CliError::Input(e.to_string()))?,
        PlacementSource::File(path) => {
            load_placement(path).map_err(|e| CliError::Input(e.to_string()))?
        }
    };

    let points = enumerate_points(config);
    let workers = worker_count(points.len())?;

    let mut outputs: Vec<Option<Result<PointOutput, CliError>>> =
        (0..points.len()).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<PointOutput, CliError>)>();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let points = &points;
            let next = &next;
            let file_trace = &file_trace;
            let placement = &placement;
            let hash = hash.as_str();
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let result = run_point(config, &points[i], file_trace, placement, hash);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            outputs[i] = Some(result);
        }
    });

    std::fs::create_dir_all(&config.output_dir)
        .map_err(|e| CliError::Input(format!("cannot create output dir: {e}")))?;
    std::fs::write(config.output_dir.join("resolved_config.txt"), &resolved)
        .map_err(|e| CliError::Input(format!("cannot write resolved config: {e}")))?;

    let timeline_dir = config.output_dir.join("timelines");
    if config.timelines {
        std::fs::create_dir_all(&timeline_dir)
            .map_err(|e| CliError::Input(format!("cannot create timeline dir: {e}")))?;
    }

    let mut csv = String::new();
    let _ = writeln!(
        csv,
        "tokens_per_rank,skew,seed,reconfig_delay_ns,{},config_hash",
        SimReport::CSV_HEADER
    );
    let mut rows_written = 0;
    for output in outputs.into_iter() {
        let output = output.expect("every sweep point produced an output")?;
        for row in output.rows {
            let _ = writeln!(csv, "{row}");
            rows_written += 1;
        }
        for (name, json) in output.timelines {
            std::fs::write(timeline_dir.join(&name), json)
                .map_err(|e| CliError::Input(format!("cannot write timeline {name}: {e}")))?;
        }
    }
    let results_path = config.output_dir.join("results.csv");
    std::fs::write(&results_path, csv)
        .map_err(|e| CliError::Input(format!("cannot write results: {e}")))?;
    Ok(RunSummary {
        rows_written,
        results_path,
        config_hash: hash,
    })
}
