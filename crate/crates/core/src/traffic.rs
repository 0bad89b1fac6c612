//! Routing traces, expert placements, and rank-to-rank traffic matrices.
//!
//! A trace records which experts each token was routed to. Combined with an
//! expert placement it yields the per-layer all-to-all traffic matrix that
//! the decomposers and the simulator consume. A synthetic generator covers
//! the two workload regimes (small skewed batches vs. large batches) when no
//! real trace is available.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::SquareMatrix;

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("token {token}: {msg}")]
    InvalidToken { token: usize, msg: String },
    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Per-token routing decisions for one MoE layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTrace {
    pub layer_id: u64,
    token_origin: Vec<usize>,
    expert_ids: Vec<Vec<usize>>,
    n_ranks: usize,
    n_experts: usize,
    top_k: usize,
}

impl RoutingTrace {
    /// Validates all invariants: origins and expert ids in range, exactly
    /// `top_k` distinct experts per token.
    pub fn new(
        layer_id: u64,
        token_origin: Vec<usize>,
        expert_ids: Vec<Vec<usize>>,
        n_ranks: usize,
        n_experts: usize,
        top_k: usize,
    ) -> Result<Self, TrafficError> {
        if n_ranks == 0 {
            return Err(TrafficError::InvalidParameter("n_ranks must be > 0".into()));
        }
        if top_k > n_experts {
            return Err(TrafficError::InvalidParameter(format!(
                "top_k {top_k} exceeds n_experts {n_experts}"
            )));
        }
        if token_origin.len() != expert_ids.len() {
            return Err(TrafficError::InvalidParameter(format!(
                "{} origins but {} expert lists",
                token_origin.len(),
                expert_ids.len()
            )));
        }
        for (t, (&origin, experts)) in token_origin.iter().zip(&expert_ids).enumerate() {
            if origin >= n_ranks {
                return Err(TrafficError::InvalidToken {
                    token: t,
                    msg: format!("origin rank {origin} out of range (n_ranks {n_ranks})"),
                });
            }
            if experts.len() != top_k {
                return Err(TrafficError::InvalidToken {
                    token: t,
                    msg: format!("{} expert ids, expected top_k = {top_k}", experts.len()),
                });
            }
            let mut seen = vec![false; n_experts];
            for &e in experts {
                if e >= n_experts {
                    return Err(TrafficError::InvalidToken {
                        token: t,
                        msg: format!("expert id {e} out of range (n_experts {n_experts})"),
                    });
                }
                if seen[e] {
                    return Err(TrafficError::InvalidToken {
                        token: t,
                        msg: format!("duplicate expert id {e}"),
                    });
                }
                seen[e] = true;
            }
        }
        Ok(Self {
            layer_id,
            token_origin,
            expert_ids,
            n_ranks,
            n_experts,
            top_k,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.token_origin.len()
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn tokens(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.token_origin
            .iter()
            .zip(&self.expert_ids)
            .map(|(&o, e)| (o, e.as_slice()))
    }
}

/// Total map expert index -> rank index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPlacement {
    expert_to_rank: Vec<usize>,
    n_ranks: usize,
}

impl ExpertPlacement {
    pub fn new(expert_to_rank: Vec<usize>, n_ranks: usize) -> Result<Self, TrafficError> {
        if n_ranks == 0 {
            return Err(TrafficError::InvalidPlacement("n_ranks must be > 0".into()));
        }
        for (e, &r) in expert_to_rank.iter().enumerate() {
            if r >= n_ranks {
                return Err(TrafficError::InvalidPlacement(format!(
                    "expert {e} placed on rank {r}, out of range (n_ranks {n_ranks})"
                )));
            }
        }
        Ok(Self {
            expert_to_rank,
            n_ranks,
        })
    }

    /// Default placement: expert `e` lives on rank `e % n_ranks`.
    pub fn round_robin(n_experts: usize, n_ranks: usize) -> Result<Self, TrafficError> {
        if n_ranks == 0 {
            return Err(TrafficError::InvalidPlacement("n_ranks must be > 0".into()));
        }
        Ok(Self {
            expert_to_rank: (0..n_experts).map(|e| e % n_ranks).collect(),
            n_ranks,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.expert_to_rank.len()
    }

    pub fn n_ranks(&self) -> usize {
        self.n_ranks
    }

    pub fn rank_of(&self, expert: usize) -> usize {
        self.expert_to_rank[expert]
    }
}

/// n x n nonnegative integer token counts; `get(s, d)` is the number of
/// tokens sent from rank `s` to rank `d`. Tokens are indivisible, so the
/// traffic layer stays integer-valued throughout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl TrafficMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "matrix dimension must be positive");
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, TrafficError> {
        let n = rows.len();
        if n == 0 {
            return Err(TrafficError::InvalidParameter("empty matrix".into()));
        }
        let mut counts = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(TrafficError::DimensionMismatch(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            counts.extend_from_slice(row);
        }
        Ok(Self { n, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, s: usize, d: usize) -> u64 {
        self.counts[s * self.n + d]
    }

    pub fn set(&mut self, s: usize, d: usize, v: u64) {
        self.counts[s * self.n + d] = v;
    }

    pub fn add(&mut self, s: usize, d: usize, v: u64) {
        self.counts[s * self.n + d] += v;
    }

    pub fn row_sum(&self, s: usize) -> u64 {
        (0..self.n).map(|d| self.get(s, d)).sum()
    }

    pub fn col_sum(&self, d: usize) -> u64 {
        (0..self.n).map(|s| self.get(s, d)).sum()
    }

    /// Row sum excluding the diagonal (tokens that actually leave rank `s`).
    pub fn off_diag_row_sum(&self, s: usize) -> u64 {
        (0..self.n).filter(|&d| d != s).map(|d| self.get(s, d)).sum()
    }

    /// Column sum excluding the diagonal (tokens arriving over the wire).
    pub fn off_diag_col_sum(&self, d: usize) -> u64 {
        (0..self.n).filter(|&s| s != d).map(|s| self.get(s, d)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn max_entry(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn nnz(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// `counts'[d][s] = counts[s][d]`; the combine-phase matrix.
    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.n);
        for s in 0..self.n {
            for d in 0..self.n {
                out.set(d, s, self.get(s, d));
            }
        }
        out
    }

    pub fn to_real(&self) -> SquareMatrix {
        let mut out = SquareMatrix::zeros(self.n);
        for s in 0..self.n {
            for d in 0..self.n {
                out[(s, d)] = self.get(s, d) as f64;
            }
        }
        out
    }
}

impl fmt::Display for TrafficMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|d| self.get(s, d).to_string()).collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `counts[s][d]` = number of (token, expert) pairs with the token
/// originating at `s` and the expert placed on `d`. A token routed to k
/// experts contributes k entries; locally routed copies land on the
/// diagonal.
pub fn build_matrix(
    trace: &RoutingTrace,
    placement: &ExpertPlacement,
) -> Result<TrafficMatrix, TrafficError> {
    if trace.n_experts() != placement.n_experts() || trace.n_ranks() != placement.n_ranks() {
        return Err(TrafficError::DimensionMismatch(format!(
            "trace has {} experts / {} ranks, placement has {} / {}",
            trace.n_experts(),
            trace.n_ranks(),
            placement.n_experts(),
            placement.n_ranks()
        )));
    }
    let mut m = TrafficMatrix::zeros(trace.n_ranks());
    for (origin, experts) in trace.tokens() {
        for &e in experts {
            m.add(origin, placement.rank_of(e), 1);
        }
    }
    Ok(m)
}

/// Parameters for the synthetic trace generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_ranks: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub tokens_per_rank: usize,
    /// Zipf exponent over expert ids; 0 means uniform.
    pub skew: f64,
    pub seed: u64,
}

impl SynthParams {
    /// Small skewed prompts: tens of tokens per rank.
    pub fn small_batch(seed: u64) -> Self {
        Self {
            n_ranks: 8,
            n_experts: 32,
            top_k: 2,
            tokens_per_rank: 32,
            skew: 1.2,
            seed,
        }
    }

    /// Throughput-style prompts: ~2k tokens per rank.
    pub fn large_batch(seed: u64) -> Self {
        Self {
            n_ranks: 8,
            n_experts: 32,
            top_k: 2,
            tokens_per_rank: 2048,
            skew: 1.2,
            seed,
        }
    }
}

/// Deterministic synthetic trace: each token independently samples `top_k`
/// distinct experts from a Zipf-like distribution with exponent `skew`.
pub fn gen_synthetic(params: &SynthParams) -> Result<RoutingTrace, TrafficError> {
    let SynthParams {
        n_ranks,
        n_experts,
        top_k,
        tokens_per_rank,
        skew,
        seed,
    } = *params;
    if n_ranks == 0 || n_experts == 0 {
        return Err(TrafficError::InvalidParameter(
            "n_ranks and n_experts must be > 0".into(),
        ));
    }
    if n_experts % n_ranks != 0 {
        return Err(TrafficError::InvalidParameter(format!(
            "n_experts {n_experts} not divisible by n_ranks {n_ranks}"
        )));
    }
    if top_k == 0 || top_k > n_experts {
        return Err(TrafficError::InvalidParameter(format!(
            "top_k {top_k} must be in 1..={n_experts}"
        )));
    }
    if !(skew.is_finite() && skew >= 0.0) {
        return Err(TrafficError::InvalidParameter(format!(
            "skew {skew} must be finite and >= 0"
        )));
    }

    let weights: Vec<f64> = (0..n_experts)
        .map(|e| 1.0 / ((e + 1) as f64).powf(skew))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tokens = n_ranks * tokens_per_rank;
    let mut token_origin = Vec::with_capacity(n_tokens);
    let mut expert_ids = Vec::with_capacity(n_tokens);
    let mut taken = vec![false; n_experts];
    for rank in 0..n_ranks {
        for _ in 0..tokens_per_rank {
            taken.iter_mut().for_each(|t| *t = false);
            let mut remaining: f64 = weights.iter().sum();
            let mut chosen = Vec::with_capacity(top_k);
            for _ in 0..top_k {
                let target = rng.gen::<f64>() * remaining;
                let mut acc = 0.0;
                let mut pick = None;
                for (e, &w) in weights.iter().enumerate() {
                    if taken[e] {
                        continue;
                    }
                    acc += w;
                    if acc > target {
                        pick = Some(e);
                        break;
                    }
                }
                // f64 accumulation can undershoot the total; fall back to the
                // last free expert.
                let pick = pick.unwrap_or_else(|| {
                    (0..n_experts).rev().find(|&e| !taken[e]).unwrap()
                });
                taken[pick] = true;
                remaining -= weights[pick];
                chosen.push(pick);
            }
            token_origin.push(rank);
            expert_ids.push(chosen);
        }
    }
    RoutingTrace::new(0, token_origin, expert_ids, n_ranks, n_experts, top_k)
}

/// Supported trace file formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    MoetraceV1,
}

fn io_err(path: &Path, source: std::io::Error) -> TrafficError {
    TrafficError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> TrafficError {
    TrafficError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads a trace file. The `moetrace v1` format is line-oriented text:
/// header `moetrace v1 <n_ranks> <n_experts> <top_k>`, then one line per
/// token: `<origin_rank> <expert_id_1> ... <expert_id_k>`.
pub fn load_trace(path: &Path, format: TraceFormat) -> Result<RoutingTrace, TrafficError> {
    let TraceFormat::MoetraceV1 = format;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected moetrace header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "moetrace" || fields[1] != "v1" {
        return Err(parse_err(
            path,
            1,
            "expected header `moetrace v1 <n_ranks> <n_experts> <top_k>`",
        ));
    }
    let parse_usize = |s: &str, line: usize, what: &str| {
        s.parse::<usize>()
            .map_err(|_| parse_err(path, line, format!("invalid {what} `{s}`")))
    };
    let n_ranks = parse_usize(fields[2], 1, "n_ranks")?;
    let n_experts = parse_usize(fields[3], 1, "n_experts")?;
    let top_k = parse_usize(fields[4], 1, "top_k")?;

    let mut token_origin = Vec::new();
    let mut expert_ids = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != top_k + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 1 origin + {top_k} expert ids, got {} fields", fields.len()),
            ));
        }
        token_origin.push(parse_usize(fields[0], lineno, "origin rank")?);
        let experts = fields[1..]
            .iter()
            .map(|s| parse_usize(s, lineno, "expert id"))
            .collect::<Result<Vec<_>, _>>()?;
        expert_ids.push(experts);
    }
    RoutingTrace::new(0, token_origin, expert_ids, n_ranks, n_experts, top_k)
}

pub fn write_trace(path: &Path, trace: &RoutingTrace) -> Result<(), TrafficError> {
    let mut out = format!(
        "moetrace v1 {} {} {}\n",
        trace.n_ranks(),
        trace.n_experts(),
        trace.top_k()
    );
    for (origin, experts) in trace.tokens() {
        out.push_str(&origin.to_string());
        for e in experts {
            out.push(' ');
            out.push_str(&e.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a placement file: `placement v1 <n_experts> <n_ranks>` then one
/// `<expert_id> <rank>` line per expert. The map must be total.
pub fn load_placement(path: &Path) -> Result<ExpertPlacement, TrafficError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected placement header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != "placement" || fields[1] != "v1" {
        return Err(parse_err(
            path,
            1,
            "expected header `placement v1 <n_experts> <n_ranks>`",
        ));
    }
    let n_experts: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("invalid n_experts `{}`", fields[2])))?;
    let n_ranks: usize = fields[3]
        .parse()
        .map_err(|_| parse_err(path, 1, format!("invalid n_ranks `{}`", fields[3])))?;
    let mut map: Vec<Option<usize>> = vec![None; n_experts];
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno, "expected `<expert_id> <rank>`"));
        }
        let e: usize = fields[0]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid expert id `{}`", fields[0])))?;
        let r: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("invalid rank `{}`", fields[1])))?;
        if e >= n_experts {
            return Err(parse_err(path, lineno, format!("expert id {e} out of range")));
        }
        if map[e].is_some() {
            return Err(parse_err(path, lineno, format!("duplicate expert id {e}")));
        }
        map[e] = Some(r);
    }
    let expert_to_rank = map
        .into_iter()
        .enumerate()
        .map(|(e, r)| r.ok_or_else(|| TrafficError::InvalidPlacement(format!("expert {e} unplaced"))))
        .collect::<Result<Vec<_>, _>>()?;
    ExpertPlacement::new(expert_to_rank, n_ranks)
}

pub fn write_placement(path: &Path, placement: &ExpertPlacement) -> Result<(), TrafficError> {
    let mut out = format!(
        "placement v1 {} {}\n",
        placement.n_experts(),
        placement.n_ranks()
    );
    for e in 0..placement.n_experts() {
        out.push_str(&format!("{e} {}\n", placement.rank_of(e)));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Matrix CSV: no header, n rows of n comma-separated decimal integers.
pub fn read_matrix_csv(path: &Path) -> Result<TrafficMatrix, TrafficError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<u64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<u64>().map_err(|_| {
                    parse_err(path, idx + 1, format!("invalid integer cell `{}`", cell.trim()))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, 1, "empty matrix"));
    }
    let n = rows.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(parse_err(
                path,
                i + 1,
                format!("row has {} cells, expected {n} (matrix must be square)", row.len()),
            ));
        }
    }
    TrafficMatrix::from_rows(&rows)
}

pub fn write_matrix_csv(path: &Path, m: &TrafficMatrix) -> Result<(), TrafficError> {
    fs::write(path, m.to_string()).map_err(|e| io_err(path, e))
}

/// Real-valued matrices (normalized traffic) print with 9 significant digits.
pub fn write_real_matrix_csv(path: &Path, m: &SquareMatrix) -> Result<(), TrafficError> {
    let mut out = String::new();
    for s in 0..m.n() {
        let row: Vec<String> = (0..m.n()).map(|d| format!("{:.8e}", m[(s, d)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}
