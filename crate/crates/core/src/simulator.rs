//! Event-driven execution of one MoE layer's dispatch-compute-combine under
//! a scheduling strategy, reporting makespan and a per-resource timeline.
//!
//! Resources are a single circuit network (one matching active at a time)
//! and one compute unit per rank. Strategies:
//!
//! * `ideal`: congestion-free bound; each rank is limited only by its own
//!   injection/ejection volume, compute runs on full batches, no overlap.
//! * `ring_sequential`: all-to-all over a static bidirectional ring with
//!   shortest-path routing, strictly communication, then compute, then
//!   combine.
//! * `decomposed` without overlap: reconfig + dispatch per matching, one
//!   full-batch compute phase per rank, reconfig + combine per matching.
//! * `decomposed` with overlap: dispatches run back-to-back on the network
//!   (dispatches have queue priority over combines); each rank computes a
//!   matching's delivery as soon as it lands and the rank is free;
//!   a matching's combine needs its compute finished on every rank and the
//!   network free. Every network phase pays the reconfiguration delay first.
//!
//! Diagonal (locally routed) tokens never touch the wire. In decomposed
//! strategies they join the first dispatched matching's compute batch;
//! matchings whose pairs are all local or empty are skipped entirely (no
//! circuit is needed, so no reconfiguration is charged).

use serde::Serialize;
use thiserror::Error;

use crate::costmodel::{compute_time, wire_time, ComputeModel, NetworkModel};
use crate::decompose::{bvn_schedule, greedy_maxweight, DecomposeError, Schedule};
use crate::sinkhorn::SinkhornParams;
use crate::traffic::TrafficMatrix;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("schedule fails conservation: {0}")]
    Conservation(DecomposeError),
    #[error("decomposition failed: {0}")]
    Decompose(#[from] DecomposeError),
}

/// Execution strategy for one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    RingSequential,
    Ideal,
    Decomposed { schedule: Schedule, overlap: bool },
}

impl Strategy {
    /// Stable label used in reports and CSV rows.
    pub fn label(&self) -> String {
        match self {
            Strategy::RingSequential => "ring".into(),
            Strategy::Ideal => "ideal".into(),
            Strategy::Decomposed { schedule, overlap } => {
                let base = schedule.source().to_string();
                if *overlap {
                    format!("{base}+overlap")
                } else {
                    base
                }
            }
        }
    }
}

/// One busy interval of one resource.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phase {
    pub label: String,
    pub resource: String,
    pub start: f64,
    pub end: f64,
}

/// Per-matching timing summary for decomposed runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchingTiming {
    pub dispatch: f64,
    pub compute: f64,
    pub combine: f64,
    pub reconfig_events: u32,
}

/// Echo of the full configuration a report was produced under.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyEcho {
    pub strategy: String,
    pub overlap: Option<bool>,
    pub schedule_source: Option<String>,
    pub n: usize,
    pub compute: ComputeModel,
    pub net: NetworkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    /// End-to-end completion time in seconds.
    pub makespan: f64,
    pub phases: Vec<Phase>,
    pub per_matching: Vec<MatchingTiming>,
    /// Tokens that entered compute on each rank.
    pub computed_tokens: Vec<u64>,
    pub total_tokens: u64,
    /// Matchings that actually occupied the network.
    pub matchings_simulated: usize,
    pub strategy_echo: StrategyEcho,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    fn phase_total(&self, label_prefix: &str) -> f64 {
        self.phases
            .iter()
            .filter(|p| p.label.starts_with(label_prefix))
            .map(|p| p.end - p.start)
            .fold(0.0, |acc, d| acc + d)
    }

    /// One-line CSV summary. Columns: strategy, n, total_tokens, matchings,
    /// makespan_us, dispatch_us, compute_us, combine_us, reconfig_us.
    /// `compute_us` is the busiest rank's total compute occupancy.
    pub fn summary_csv_row(&self) -> String {
        let us = 1e6;
        let mut per_rank = vec![0.0f64; self.strategy_echo.n];
        for p in &self.phases {
            if p.label.starts_with("compute") || p.label.starts_with("local") {
                if let Some(r) = p.resource.strip_prefix("rank") {
                    if let Ok(r) = r.parse::<usize>() {
                        per_rank[r] += p.end - p.start;
                    }
                }
            }
        }
        let compute_busy = per_rank.iter().cloned().fold(0.0, f64::max);
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.strategy_echo.strategy,
            self.strategy_echo.n,
            self.total_tokens,
            self.matchings_simulated,
            self.makespan * us,
            self.phase_total("dispatch") * us,
            compute_busy * us,
            self.phase_total("combine") * us,
            self.phase_total("reconfig") * us,
        )
    }

    pub const CSV_HEADER: &'static str =
        "strategy,n,total_tokens,matchings,makespan_us,dispatch_us,compute_us,combine_us,reconfig_us";
}

struct Timeline {
    phases: Vec<Phase>,
    makespan: f64,
}

impl Timeline {
    fn new() -> Self {
        Self {
            phases: Vec::new(),
            makespan: 0.0,
        }
    }

    fn push(&mut self, label: String, resource: String, start: f64, end: f64) {
        debug_assert!(start >= 0.0 && end >= start);
        self.makespan = self.makespan.max(end);
        self.phases.push(Phase {
            label,
            resource,
            start,
            end,
        });
    }
}

/// Runs one layer under `strategy` and returns the timeline. For decomposed
/// strategies the schedule is re-verified against `m` first and the
/// simulation refuses to run on a non-conserving schedule.
pub fn simulate(
    m: &TrafficMatrix,
    strategy: &Strategy,
    compute: &ComputeModel,
    net: &NetworkModel,
) -> Result<SimReport, SimError> {
    let echo = StrategyEcho {
        strategy: strategy.label(),
        overlap: match strategy {
            Strategy::Decomposed { overlap, .. } => Some(*overlap),
            _ => None,
        },
        schedule_source: match strategy {
            Strategy::Decomposed { schedule, .. } => Some(schedule.source().to_string()),
            _ => None,
        },
        n: m.n(),
        compute: compute.clone(),
        net: net.clone(),
    };
    match strategy {
        Strategy::Ideal => Ok(simulate_bulk(m, compute, net, echo, ideal_wire_seconds)),
        Strategy::RingSequential => Ok(simulate_bulk(m, compute, net, echo, ring_wire_seconds)),
        Strategy::Decomposed { schedule, overlap } => {
            if schedule.n() != m.n() {
                return Err(SimError::DimensionMismatch(format!(
                    "matrix n = {}, schedule n = {}",
                    m.n(),
                    schedule.n()
                )));
            }
            schedule
                .verify_conservation(m)
                .map_err(SimError::Conservation)?;
            Ok(simulate_decomposed(m, schedule, *overlap, compute, net, echo))
        }
    }
}

/// Congestion-free bound: each rank is limited only by what it injects and
/// ejects over the wire.
fn ideal_wire_seconds(m: &TrafficMatrix, net: &NetworkModel) -> f64 {
    let bound = (0..m.n())
        .map(|r| m.off_diag_row_sum(r).max(m.off_diag_col_sum(r)))
        .max()
        .unwrap_or(0);
    wire_time(net, bound)
}

/// Static bidirectional ring with deterministic shortest-path routing: each
/// pair takes the shorter arc, splitting evenly when the two arcs tie (even
/// n, antipodal pairs). Completion is bound by the most loaded directed
/// link.
fn ring_wire_seconds(m: &TrafficMatrix, net: &NetworkModel) -> f64 {
    let n = m.n();
    if n == 1 {
        return 0.0;
    }
    // cw[r]: load on r -> (r+1) % n; ccw[r]: load on r -> (r-1+n) % n
    let mut cw = vec![0.0f64; n];
    let mut ccw = vec![0.0f64; n];
    for s in 0..n {
        for d in 0..n {
            let tokens = m.get(s, d) as f64;
            if tokens == 0.0 || s == d {
                continue;
            }
            let fwd = (d + n - s) % n;
            let bwd = n - fwd;
            if fwd < bwd {
                for k in 0..fwd {
                    cw[(s + k) % n] += tokens;
                }
            } else if bwd < fwd {
                for k in 0..bwd {
                    ccw[(s + n - k) % n] += tokens;
                }
            } else {
                for k in 0..fwd {
                    cw[(s + k) % n] += tokens / 2.0;
                }
                for k in 0..bwd {
                    ccw[(s + n - k) % n] += tokens / 2.0;
                }
            }
        }
    }
    let max_load = cw.iter().chain(ccw.iter()).cloned().fold(0.0, f64::max);
    max_load * net.bytes_per_token / net.bandwidth
}

/// Shared shape of the two bulk strategies: one dispatch block, full-batch
/// compute on every rank in parallel, one combine block, no overlap.
fn simulate_bulk(
    m: &TrafficMatrix,
    compute: &ComputeModel,
    net: &NetworkModel,
    echo: StrategyEcho,
    wire_seconds: fn(&TrafficMatrix, &NetworkModel) -> f64,
) -> SimReport {
    let n = m.n();
    let mut tl = Timeline::new();
    let dispatch = wire_seconds(m, net);
    if dispatch > 0.0 {
        tl.push("dispatch".into(), "network".into(), 0.0, dispatch);
    }
    let computed_tokens: Vec<u64> = (0..n).map(|r| m.col_sum(r)).collect();
    let mut compute_end = dispatch;
    for (r, &batch) in computed_tokens.iter().enumerate() {
        if batch > 0 {
            let t = compute_time(compute, batch);
            tl.push("compute".into(), format!("rank{r}"), dispatch, dispatch + t);
            compute_end = compute_end.max(dispatch + t);
        }
    }
    let combine = wire_seconds(&m.transpose(), net);
    if combine > 0.0 {
        tl.push(
            "combine".into(),
            "network".into(),
            compute_end,
            compute_end + combine,
        );
    }
    SimReport {
        makespan: tl.makespan,
        phases: tl.phases,
        per_matching: vec![],
        computed_tokens,
        total_tokens: m.total(),
        matchings_simulated: 0,
        strategy_echo: echo,
    }
}

/// A matching reduced to what the network sees: its nonlocal wire
/// bottleneck and per-rank deliveries.
struct EffectiveMatching {
    index: usize,
    wire: f64,
    delivered: Vec<u64>,
}

fn simulate_decomposed(
    m: &TrafficMatrix,
    schedule: &Schedule,
    overlap: bool,
    compute: &ComputeModel,
    net: &NetworkModel,
    echo: StrategyEcho,
) -> SimReport {
    let n = m.n();
    let mut per_matching = vec![
        MatchingTiming {
            dispatch: 0.0,
            compute: 0.0,
            combine: 0.0,
            reconfig_events: 0,
        };
        schedule.len()
    ];
    let mut locals = vec![0u64; n];
    let mut effective: Vec<EffectiveMatching> = Vec::new();
    for (i, matching) in schedule.matchings().iter().enumerate() {
        let mut wire_bottleneck = 0u64;
        let mut delivered = vec![0u64; n];
        for (s, &tokens) in matching.tokens().iter().enumerate() {
            let d = matching.perm().dest(s);
            if s == d {
                locals[s] += tokens;
            } else {
                delivered[d] += tokens;
                wire_bottleneck = wire_bottleneck.max(tokens);
            }
        }
        if wire_bottleneck > 0 {
            effective.push(EffectiveMatching {
                index: i,
                wire: wire_time(net, wire_bottleneck),
                delivered,
            });
        }
    }

    let rc = net.reconfig_delay;
    let mut tl = Timeline::new();
    let mut computed_tokens = vec![0u64; n];

    // Dispatch pass: the network serves dispatches back-to-back in schedule
    // order under both modes (with overlap, dispatches outrank combines and
    // their data is always ready).
    let mut net_t = 0.0f64;
    let mut dispatch_end = Vec::with_capacity(effective.len());
    for em in &effective {
        tl.push(
            format!("reconfig[{}]", em.index),
            "network".into(),
            net_t,
            net_t + rc,
        );
        tl.push(
            format!("dispatch[{}]", em.index),
            "network".into(),
            net_t + rc,
            net_t + rc + em.wire,
        );
        net_t += rc + em.wire;
        dispatch_end.push(net_t);
        per_matching[em.index].dispatch = em.wire;
        per_matching[em.index].reconfig_events += 1;
    }

    // compute_ready[k]: when matching k's compute is finished on every rank
    let mut compute_ready: Vec<f64> = dispatch_end.clone();
    let mut rank_free = vec![0.0f64; n];

    if overlap {
        for (k, em) in effective.iter().enumerate() {
            for r in 0..n {
                let mut batch = em.delivered[r];
                if k == 0 {
                    batch += locals[r];
                }
                if batch == 0 {
                    continue;
                }
                let start = dispatch_end[k].max(rank_free[r]);
                let end = start + compute_time(compute, batch);
                tl.push(format!("compute[{}]", em.index), format!("rank{r}"), start, end);
                rank_free[r] = end;
                compute_ready[k] = compute_ready[k].max(end);
                computed_tokens[r] += batch;
                let dur = end - start;
                if dur > per_matching[em.index].compute {
                    per_matching[em.index].compute = dur;
                }
            }
        }
        if effective.is_empty() {
            for r in 0..n {
                if locals[r] > 0 {
                    let t = compute_time(compute, locals[r]);
                    tl.push("local-compute".into(), format!("rank{r}"), 0.0, t);
                    rank_free[r] = t;
                    computed_tokens[r] += locals[r];
                }
            }
        }
    } else {
        // one full batch per rank once every dispatch has landed
        let dispatch_done = net_t;
        for r in 0..n {
            let batch: u64 =
                effective.iter().map(|em| em.delivered[r]).sum::<u64>() + locals[r];
            if batch == 0 {
                continue;
            }
            let end = dispatch_done + compute_time(compute, batch);
            tl.push("compute".into(), format!("rank{r}"), dispatch_done, end);
            rank_free[r] = end;
            computed_tokens[r] += batch;
        }
        let all_done = rank_free.iter().cloned().fold(dispatch_done, f64::max);
        compute_ready.iter_mut().for_each(|t| *t = all_done);
        net_t = all_done;
    }

    // Combine pass: per matching in order, gated on that matching's compute
    // (all of it, in no-overlap mode) and on the network being free.
    for (k, em) in effective.iter().enumerate() {
        let start = net_t.max(compute_ready[k]);
        tl.push(
            format!("reconfig[{}]", em.index),
            "network".into(),
            start,
            start + rc,
        );
        tl.push(
            format!("combine[{}]", em.index),
            "network".into(),
            start + rc,
            start + rc + em.wire,
        );
        net_t = start + rc + em.wire;
        per_matching[em.index].combine = em.wire;
        per_matching[em.index].reconfig_events += 1;
    }

    let makespan = tl.makespan;
    SimReport {
        makespan,
        phases: tl.phases,
        per_matching,
        computed_tokens,
        total_tokens: m.total(),
        matchings_simulated: effective.len(),
        strategy_echo: echo,
    }
}

/// Standard comparison grid: ring, BvN with and without overlap, max-weight
/// with and without overlap, and the congestion-free ideal. Decomposers run
/// with their default parameters and matchings stay in production order.
pub fn run_matrix_suite(
    m: &TrafficMatrix,
    compute: &ComputeModel,
    net: &NetworkModel,
) -> Result<Vec<(String, SimReport)>, SimError> {
    let bvn = bvn_schedule(m, &SinkhornParams::default(), crate::decompose::DEFAULT_COEFF_FLOOR)?;
    let mw = greedy_maxweight(m);
    let strategies = [
        Strategy::RingSequential,
        Strategy::Decomposed {
            schedule: bvn.clone(),
            overlap: false,
        },
        Strategy::Decomposed {
            schedule: bvn,
            overlap: true,
        },
        Strategy::Decomposed {
            schedule: mw.clone(),
            overlap: false,
        },
        Strategy::Decomposed {
            schedule: mw,
            overlap: true,
        },
        Strategy::Ideal,
    ];
    let mut out = Vec::with_capacity(strategies.len());
    for strategy in strategies {
        let label = strategy.label();
        let report = simulate(m, &strategy, compute, net)?;
        out.push((label, report));
    }
    Ok(out)
}
