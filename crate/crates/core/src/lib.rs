//! Scheduling MoE all-to-all traffic over a reconfigurable circuit-switched
//! fabric, and measuring what the schedule does to end-to-end execution.
//!
//! The pipeline: ingest or synthesize a routing trace ([`traffic`]), build
//! the rank-to-rank token matrix, decompose it into a sequence of circuit
//! matchings — either Birkhoff peeling on the Sinkhorn-normalized matrix
//! ([`sinkhorn`], [`decompose`]) or greedy max-weight extraction directly on
//! token counts ([`assignment`], [`decompose`]) — then replay
//! dispatch-compute-combine under a cost model ([`costmodel`]) with or
//! without communication-compute overlap ([`simulator`]), against
//! sequential-ring and congestion-free baselines.

pub mod assignment;
pub mod costmodel;
pub mod decompose;
pub mod matrix;
pub mod simulator;
pub mod sinkhorn;
pub mod traffic;

pub use assignment::{max_weight_assignment, support_perfect_matching, Permutation};
pub use costmodel::{compute_time, load_profile, matching_time, wire_time, ComputeModel, NetworkModel};
pub use decompose::{
    bvn_allocate, bvn_decompose, bvn_schedule, greedy_maxweight, order_schedule, Matching,
    OrderPolicy, Schedule, ScheduleSource, TimingModels,
};
pub use matrix::SquareMatrix;
pub use simulator::{run_matrix_suite, simulate, SimReport, Strategy};
pub use sinkhorn::{normalize, normalize_with, BistochasticMatrix, SinkhornParams};
pub use traffic::{
    build_matrix, gen_synthetic, load_placement, load_trace, read_matrix_csv, write_matrix_csv,
    write_trace, ExpertPlacement, RoutingTrace, SynthParams, TraceFormat, TrafficMatrix,
};
