//! Decomposing a traffic matrix into an ordered schedule of circuit
//! matchings.
//!
//! Two decomposers are provided. Birkhoff peeling expresses the normalized
//! matrix as a convex combination of permutations and then maps the
//! coefficients back to integer token allocations; leftovers caused by
//! rounding and residual slack are cleared by a max-weight cleanup pass so
//! schedules always conserve the input exactly. Greedy max-weight operates
//! directly on token counts, repeatedly extracting the heaviest matching and
//! zeroing the selected entries, which bounds the schedule length by the
//! number of nonzero entries and in practice keeps it near n.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{max_weight_assignment, support_perfect_matching, Permutation};
use crate::costmodel::{compute_time, matching_time, ComputeModel, NetworkModel};
use crate::matrix::SquareMatrix;
use crate::sinkhorn::{normalize_with, BistochasticMatrix, SinkhornError, SinkhornParams};
use crate::traffic::TrafficMatrix;

/// Default coefficient floor: peels carrying less than 0.1% of the budget
/// are dropped rather than scheduled.
pub const DEFAULT_COEFF_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DecomposeError {
    #[error("input residual {residual} exceeds coeff_floor {coeff_floor}; normalize tighter or raise the floor")]
    ResidualExceedsFloor { residual: f64, coeff_floor: f64 },
    #[error("no perfect matching in the positive support with {remaining_mass} mass left")]
    NoPerfectMatching { remaining_mass: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("johnson2 ordering requires compute and network models")]
    MissingCostModel,
    #[error("schedule violates conservation at ({s}, {d}): scheduled {scheduled}, matrix has {expected}")]
    ConservationViolation {
        s: usize,
        d: usize,
        scheduled: u64,
        expected: u64,
    },
    #[error("invalid matching: {0}")]
    InvalidMatching(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Normalization(#[from] SinkhornError),
    #[error("schedule JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// One circuit configuration: a permutation of ranks plus the token count
/// each source sends to its matched destination during the slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    perm: Permutation,
    tokens: Vec<u64>,
    coefficient: Option<f64>,
    cleanup: bool,
}

impl Matching {
    pub fn new(
        perm: Permutation,
        tokens: Vec<u64>,
        coefficient: Option<f64>,
    ) -> Result<Self, DecomposeError> {
        if tokens.len() != perm.n() {
            return Err(DecomposeError::InvalidMatching(format!(
                "{} token entries for a permutation of {}",
                tokens.len(),
                perm.n()
            )));
        }
        if tokens.iter().all(|&t| t == 0) {
            return Err(DecomposeError::InvalidMatching(
                "matching carries no tokens".into(),
            ));
        }
        Ok(Self {
            perm,
            tokens,
            coefficient,
            cleanup: false,
        })
    }

    fn with_cleanup(mut self) -> Self {
        self.cleanup = true;
        self.coefficient = None;
        self
    }

    pub fn n(&self) -> usize {
        self.perm.n()
    }

    pub fn perm(&self) -> &Permutation {
        &self.perm
    }

    pub fn tokens(&self) -> &[u64] {
        &self.tokens
    }

    /// BvN coefficient; absent for max-weight and cleanup matchings.
    pub fn coefficient(&self) -> Option<f64> {
        self.coefficient
    }

    /// True for matchings appended to clear post-peel leftovers.
    pub fn is_cleanup(&self) -> bool {
        self.cleanup
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.iter().sum()
    }
}

/// Which decomposer produced a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleSource {
    Bvn,
    #[serde(rename = "maxweight")]
    MaxWeight,
}

impl std::fmt::Display for ScheduleSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScheduleSource::Bvn => write!(f, "bvn"),
            ScheduleSource::MaxWeight => write!(f, "maxweight"),
        }
    }
}

/// Ordered list of matchings with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    n: usize,
    source: ScheduleSource,
    matchings: Vec<Matching>,
}

impl Schedule {
    pub fn new(
        n: usize,
        source: ScheduleSource,
        matchings: Vec<Matching>,
    ) -> Result<Self, DecomposeError> {
        for (i, m) in matchings.iter().enumerate() {
            if m.n() != n {
                return Err(DecomposeError::InvalidSchedule(format!(
                    "matching {i} has n = {}, schedule has n = {n}",
                    m.n()
                )));
            }
        }
        Ok(Self {
            n,
            source,
            matchings,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn source(&self) -> ScheduleSource {
        self.source
    }

    pub fn matchings(&self) -> &[Matching] {
        &self.matchings
    }

    pub fn len(&self) -> usize {
        self.matchings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matchings.is_empty()
    }

    /// Sums every matching back into a traffic matrix.
    pub fn reconstruct(&self) -> TrafficMatrix {
        let mut m = TrafficMatrix::zeros(self.n);
        for matching in &self.matchings {
            for s in 0..self.n {
                m.add(s, matching.perm().dest(s), matching.tokens()[s]);
            }
        }
        m
    }

    /// Exact integer conservation check against the matrix the schedule was
    /// derived from.
    pub fn verify_conservation(&self, m: &TrafficMatrix) -> Result<(), DecomposeError> {
        if m.n() != self.n {
            return Err(DecomposeError::DimensionMismatch(format!(
                "schedule n = {}, matrix n = {}",
                self.n,
                m.n()
            )));
        }
        let rebuilt = self.reconstruct();
        for s in 0..self.n {
            for d in 0..self.n {
                if rebuilt.get(s, d) != m.get(s, d) {
                    return Err(DecomposeError::ConservationViolation {
                        s,
                        d,
                        scheduled: rebuilt.get(s, d),
                        expected: m.get(s, d),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DecomposeError> {
        Ok(serde_json::to_string_pretty(&ScheduleWire::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self, DecomposeError> {
        let wire: ScheduleWire = serde_json::from_str(text)?;
        wire.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct MatchingWire {
    dest_of: Vec<usize>,
    tokens: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    coefficient: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    cleanup: bool,
}

#[derive(Serialize, Deserialize)]
struct ScheduleWire {
    n: usize,
    source: ScheduleSource,
    matchings: Vec<MatchingWire>,
}

impl From<&Schedule> for ScheduleWire {
    fn from(s: &Schedule) -> Self {
        Self {
            n: s.n,
            source: s.source,
            matchings: s
                .matchings
                .iter()
                .map(|m| MatchingWire {
                    dest_of: m.perm().dest_of().to_vec(),
                    tokens: m.tokens().to_vec(),
                    coefficient: m.coefficient(),
                    cleanup: m.is_cleanup(),
                })
                .collect(),
        }
    }
}

impl TryFrom<ScheduleWire> for Schedule {
    type Error = DecomposeError;

    fn try_from(wire: ScheduleWire) -> Result<Self, Self::Error> {
        let matchings = wire
            .matchings
            .into_iter()
            .map(|mw| {
                let perm = Permutation::new(mw.dest_of)
                    .map_err(|e| DecomposeError::InvalidSchedule(e.to_string()))?;
                let mut m = Matching::new(perm, mw.tokens, mw.coefficient)?;
                m.cleanup = mw.cleanup;
                Ok(m)
            })
            .collect::<Result<Vec<_>, DecomposeError>>()?;
        Schedule::new(wire.n, wire.source, matchings)
    }
}

/// Classic Birkhoff peeling of a (near-)doubly-stochastic matrix.
///
/// Each round extracts a permutation from the residual (max-weight on the
/// residual values, falling back to a pure support matching when the
/// heaviest permutation dips below the floor), peels the minimum entry along
/// it, and stops once no residual entry exceeds `coeff_floor`. Every round
/// drives at least one above-floor entry to exactly zero, so the loop
/// terminates within n^2 rounds.
///
/// Guarantee: the coefficients sum to at least `1 - n * coeff_floor`
/// (within the input residual). Because every peel drains each row by
/// exactly lambda, the coefficient deficit equals the per-row leftover;
/// peeling also ends when the above-floor support loses its perfect
/// matching, which on near-bistochastic inputs only happens once that
/// deficit is within the guarantee. Inputs too far from bistochastic fail
/// with the leftover mass in the error.
pub fn bvn_decompose(
    b: &BistochasticMatrix,
    coeff_floor: f64,
) -> Result<Vec<(Permutation, f64)>, DecomposeError> {
    if b.residual() > coeff_floor {
        return Err(DecomposeError::ResidualExceedsFloor {
            residual: b.residual(),
            coeff_floor,
        });
    }
    let n = b.n();
    let mut residual = b.values().clone();
    let mut peels = Vec::new();
    loop {
        if residual.max_entry() <= coeff_floor {
            break;
        }
        let (mut perm, _) =
            max_weight_assignment(&residual).expect("residual entries stay finite");
        let min_along = |p: &Permutation, r: &SquareMatrix| {
            (0..n).map(|s| r[(s, p.dest(s))]).fold(f64::INFINITY, f64::min)
        };
        let mut lambda = min_along(&perm, &residual);
        if lambda <= coeff_floor {
            // The heaviest permutation crosses a near-zero entry; look for a
            // matching confined to the above-floor support instead.
            match support_perfect_matching(n, |s, d| residual[(s, d)] > coeff_floor) {
                Some(p) => {
                    perm = p;
                    lambda = min_along(&perm, &residual);
                }
                None => {
                    let per_row_deficit = residual.total() / n as f64;
                    if per_row_deficit > n as f64 * coeff_floor {
                        return Err(DecomposeError::NoPerfectMatching {
                            remaining_mass: residual.total(),
                        });
                    }
                    break;
                }
            }
        }
        for s in 0..n {
            let d = perm.dest(s);
            residual[(s, d)] -= lambda;
        }
        peels.push((perm, lambda));
    }
    Ok(peels)
}

/// Maps BvN peels back to integer token allocations.
///
/// The budget is the largest row or column sum of the original matrix; peel
/// i may move up to `round(lambda_i * budget)` tokens per pair. Demand the
/// peels fail to cover (rounding, residual slack, normalization distortion)
/// is cleared by a greedy max-weight pass whose matchings are tagged
/// `cleanup`, so the schedule conserves the input exactly.
pub fn bvn_allocate(
    m: &TrafficMatrix,
    peels: &[(Permutation, f64)],
) -> Result<Schedule, DecomposeError> {
    let n = m.n();
    for (i, (perm, _)) in peels.iter().enumerate() {
        if perm.n() != n {
            return Err(DecomposeError::DimensionMismatch(format!(
                "peel {i} has n = {}, matrix has n = {n}",
                perm.n()
            )));
        }
    }
    let budget = (0..n)
        .map(|i| m.row_sum(i).max(m.col_sum(i)))
        .max()
        .unwrap_or(0);
    let mut remaining = m.clone();
    let mut matchings = Vec::new();
    for (perm, lambda) in peels {
        let quota = (lambda * budget as f64).round() as u64;
        let mut tokens = vec![0u64; n];
        for (s, slot) in tokens.iter_mut().enumerate() {
            let d = perm.dest(s);
            let alloc = remaining.get(s, d).min(quota);
            remaining.set(s, d, remaining.get(s, d) - alloc);
            *slot = alloc;
        }
        if tokens.iter().any(|&t| t > 0) {
            matchings.push(Matching::new(perm.clone(), tokens, Some(*lambda))?);
        }
    }
    if remaining.total() > 0 {
        let cleanup = greedy_maxweight(&remaining);
        matchings.extend(
            cleanup
                .matchings
                .into_iter()
                .map(Matching::with_cleanup),
        );
    }
    Schedule::new(n, ScheduleSource::Bvn, matchings)
}

/// Full pipeline: Sinkhorn-normalize, peel, allocate. A zero matrix yields
/// an empty schedule rather than a normalization error.
///
/// Peeling only needs the residual below `coeff_floor`, which is far looser
/// than the default normalization tolerance. When a sparse matrix stalls
/// short of the tight tolerance, normalization is retried once at the floor
/// before giving up.
pub fn bvn_schedule(
    m: &TrafficMatrix,
    params: &SinkhornParams,
    coeff_floor: f64,
) -> Result<Schedule, DecomposeError> {
    if m.total() == 0 {
        return Schedule::new(m.n(), ScheduleSource::Bvn, vec![]);
    }
    let b = match normalize_with(m, params) {
        Ok(b) => b,
        Err(SinkhornError::NonConvergence { .. }) if coeff_floor > params.tolerance => {
            let relaxed = SinkhornParams {
                tolerance: coeff_floor,
                ..params.clone()
            };
            normalize_with(m, &relaxed)?
        }
        Err(e) => return Err(e.into()),
    };
    let peels = bvn_decompose(&b, coeff_floor)?;
    bvn_allocate(m, &peels)
}

/// Greedy max-weight decomposition directly on token counts: extract the
/// maximum-weight perfect matching of the residual, move the selected
/// entries in full, repeat until nothing is left.
pub fn greedy_maxweight(m: &TrafficMatrix) -> Schedule {
    let n = m.n();
    assert!(
        m.max_entry() < (1u64 << 53),
        "token counts beyond 2^53 lose precision in the weight solver"
    );
    let mut residual = m.clone();
    let mut matchings = Vec::new();
    let bound = m.nnz() + 1;
    for _ in 0..bound {
        let weights = residual.to_real();
        let (perm, weight) = max_weight_assignment(&weights).expect("token counts are finite");
        if weight <= 0.0 {
            break;
        }
        let tokens: Vec<u64> = (0..n).map(|s| residual.get(s, perm.dest(s))).collect();
        for s in 0..n {
            residual.set(s, perm.dest(s), 0);
        }
        matchings.push(
            Matching::new(perm, tokens, None).expect("positive weight implies nonzero tokens"),
        );
    }
    debug_assert_eq!(residual.total(), 0, "greedy max-weight left residual mass");
    Schedule::new(n, ScheduleSource::MaxWeight, matchings)
        .expect("matchings inherit the matrix dimension")
}

/// How to order a schedule's matchings before execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    AsProduced,
    WeightDesc,
    WeightAsc,
    /// Johnson's two-machine rule over (dispatch wire time, compute window),
    /// a surrogate for the dispatch-compute-combine flow shop.
    Johnson2,
}

impl std::str::FromStr for OrderPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_produced" => Ok(Self::AsProduced),
            "weight_desc" => Ok(Self::WeightDesc),
            "weight_asc" => Ok(Self::WeightAsc),
            "johnson2" => Ok(Self::Johnson2),
            other => Err(format!(
                "unknown ordering policy `{other}` (expected as_produced, weight_desc, weight_asc, johnson2)"
            )),
        }
    }
}

/// Models needed by the johnson2 policy.
#[derive(Debug, Clone, Copy)]
pub struct TimingModels<'a> {
    pub compute: &'a ComputeModel,
    pub net: &'a NetworkModel,
}

/// Johnson's rule for two-machine flow shops: jobs with machine-1 time at
/// most their machine-2 time go first in ascending machine-1 order, the rest
/// go last in descending machine-2 order. Returns job indices.
pub fn johnson_two_machine_order(jobs: &[(f64, f64)]) -> Vec<usize> {
    let mut first: Vec<usize> = (0..jobs.len()).filter(|&i| jobs[i].0 <= jobs[i].1).collect();
    first.sort_by(|&a, &b| jobs[a].0.total_cmp(&jobs[b].0).then(a.cmp(&b)));
    let mut last: Vec<usize> = (0..jobs.len()).filter(|&i| jobs[i].0 > jobs[i].1).collect();
    last.sort_by(|&a, &b| jobs[b].1.total_cmp(&jobs[a].1).then(a.cmp(&b)));
    first.extend(last);
    first
}

/// Permutes a schedule's matchings by the given policy. Reordering only;
/// conservation is untouched.
pub fn order_schedule(
    schedule: Schedule,
    policy: OrderPolicy,
    models: Option<TimingModels<'_>>,
) -> Result<Schedule, DecomposeError> {
    let order: Vec<usize> = match policy {
        OrderPolicy::AsProduced => return Ok(schedule),
        OrderPolicy::WeightDesc => {
            let mut idx: Vec<usize> = (0..schedule.len()).collect();
            idx.sort_by_key(|&i| {
                (std::cmp::Reverse(schedule.matchings[i].total_tokens()), i)
            });
            idx
        }
        OrderPolicy::WeightAsc => {
            let mut idx: Vec<usize> = (0..schedule.len()).collect();
            idx.sort_by_key(|&i| (schedule.matchings[i].total_tokens(), i));
            idx
        }
        OrderPolicy::Johnson2 => {
            let models = models.ok_or(DecomposeError::MissingCostModel)?;
            let jobs: Vec<(f64, f64)> = schedule
                .matchings
                .iter()
                .map(|m| {
                    let dispatch = matching_time(models.net, m);
                    // compute window = slowest rank in the matching
                    let compute = m
                        .tokens()
                        .iter()
                        .map(|&t| compute_time(models.compute, t))
                        .fold(0.0, f64::max);
                    (dispatch, compute)
                })
                .collect();
            johnson_two_machine_order(&jobs)
        }
    };
    let mut slots: Vec<Option<Matching>> = schedule.matchings.into_iter().map(Some).collect();
    let matchings = order
        .into_iter()
        .map(|i| slots[i].take().expect("order is a permutation"))
        .collect();
    Schedule::new(schedule.n, schedule.source, matchings)
}
