//! Time models: expert compute time vs. token batch size, wire time vs.
//! token count, and circuit reconfiguration delay.
//!
//! Expert kernels show a characteristic knee: below a few hundred tokens the
//! fixed launch/synchronization overhead dominates, beyond it execution is
//! roughly linear. The knee model pins the slope to `floor / knee_tokens` so
//! the curve is continuous at the knee; the table model interpolates a
//! measured profile instead.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decompose::Matching;

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("profile table is empty")]
    EmptyTable,
    #[error("profile row {row}: {msg}")]
    NotMonotonic { row: usize, msg: String },
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

/// One measured point of a compute profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub batch: u64,
    pub seconds: f64,
}

/// Expert compute time as a function of token batch size. A batch of zero
/// always costs zero: no tokens, no kernel launched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComputeModel {
    Linear {
        per_token: f64,
    },
    Knee {
        floor: f64,
        knee_tokens: u64,
        per_token: f64,
    },
    Table {
        rows: Vec<ProfileRow>,
    },
}

/// Default fixed execution overhead: 250 us up to 256 tokens.
pub const DEFAULT_KNEE_FLOOR: f64 = 250e-6;
pub const DEFAULT_KNEE_TOKENS: u64 = 256;

impl ComputeModel {
    pub fn linear(per_token: f64) -> Result<Self, CostModelError> {
        if !(per_token >= 0.0 && per_token.is_finite()) {
            return Err(CostModelError::InvalidParameter(format!(
                "per_token {per_token} must be finite and >= 0"
            )));
        }
        Ok(Self::Linear { per_token })
    }

    /// Knee with slope pinned by continuity: `per_token = floor / knee_tokens`.
    pub fn knee(floor: f64, knee_tokens: u64) -> Result<Self, CostModelError> {
        if !(floor >= 0.0 && floor.is_finite()) || knee_tokens == 0 {
            return Err(CostModelError::InvalidParameter(format!(
                "floor {floor} must be >= 0 and knee_tokens {knee_tokens} > 0"
            )));
        }
        Ok(Self::Knee {
            floor,
            knee_tokens,
            per_token: floor / knee_tokens as f64,
        })
    }

    pub fn knee_default() -> Self {
        Self::knee(DEFAULT_KNEE_FLOOR, DEFAULT_KNEE_TOKENS).unwrap()
    }

    /// Validated profile table: batch strictly increasing, seconds
    /// nonnegative and nondecreasing.
    pub fn table(rows: Vec<ProfileRow>) -> Result<Self, CostModelError> {
        if rows.is_empty() {
            return Err(CostModelError::EmptyTable);
        }
        for (i, row) in rows.iter().enumerate() {
            if !(row.seconds >= 0.0 && row.seconds.is_finite()) {
                return Err(CostModelError::NotMonotonic {
                    row: i + 1,
                    msg: format!("seconds {} must be finite and >= 0", row.seconds),
                });
            }
            if i > 0 {
                if row.batch <= rows[i - 1].batch {
                    return Err(CostModelError::NotMonotonic {
                        row: i + 1,
                        msg: format!(
                            "batch {} not strictly greater than previous {}",
                            row.batch,
                            rows[i - 1].batch
                        ),
                    });
                }
                if row.seconds < rows[i - 1].seconds {
                    return Err(CostModelError::NotMonotonic {
                        row: i + 1,
                        msg: format!(
                            "seconds {} decreases from previous {}",
                            row.seconds,
                            rows[i - 1].seconds
                        ),
                    });
                }
            }
        }
        Ok(Self::Table { rows })
    }
}

/// Seconds to process `batch` tokens on one expert rank.
pub fn compute_time(model: &ComputeModel, batch: u64) -> f64 {
    if batch == 0 {
        return 0.0;
    }
    match model {
        ComputeModel::Linear { per_token } => per_token * batch as f64,
        ComputeModel::Knee {
            floor, per_token, ..
        } => (per_token * batch as f64).max(*floor),
        ComputeModel::Table { rows } => {
            let first = rows[0];
            if batch <= first.batch {
                // fixed-overhead plateau below the first measurement
                return first.seconds;
            }
            let last = rows[rows.len() - 1];
            if batch >= last.batch {
                if rows.len() == 1 {
                    return last.seconds;
                }
                let prev = rows[rows.len() - 2];
                let slope = (last.seconds - prev.seconds) / (last.batch - prev.batch) as f64;
                return last.seconds + slope * (batch - last.batch) as f64;
            }
            let hi = rows.partition_point(|r| r.batch < batch);
            let (a, b) = (rows[hi - 1], rows[hi]);
            let t = (batch - a.batch) as f64 / (b.batch - a.batch) as f64;
            a.seconds + t * (b.seconds - a.seconds)
        }
    }
}

/// Circuit parameters: one full-rate link per configured pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    /// Bytes per second per circuit.
    pub bandwidth: f64,
    /// Bytes per routed token (hidden size x dtype width).
    pub bytes_per_token: f64,
    /// Dead time while the switch changes its matching.
    pub reconfig_delay: f64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        Self {
            bandwidth: 100e9,
            bytes_per_token: 4096.0 * 2.0,
            reconfig_delay: 10e-9,
        }
    }
}

impl NetworkModel {
    pub fn validate(&self) -> Result<(), CostModelError> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(CostModelError::InvalidParameter(format!(
                "bandwidth {} must be finite and > 0",
                self.bandwidth
            )));
        }
        if !(self.bytes_per_token > 0.0 && self.bytes_per_token.is_finite()) {
            return Err(CostModelError::InvalidParameter(format!(
                "bytes_per_token {} must be finite and > 0",
                self.bytes_per_token
            )));
        }
        if !(self.reconfig_delay >= 0.0 && self.reconfig_delay.is_finite()) {
            return Err(CostModelError::InvalidParameter(format!(
                "reconfig_delay {} must be finite and >= 0",
                self.reconfig_delay
            )));
        }
        Ok(())
    }
}

/// Seconds to move `tokens` across one circuit.
pub fn wire_time(net: &NetworkModel, tokens: u64) -> f64 {
    tokens as f64 * net.bytes_per_token / net.bandwidth
}

/// Completion time of one matching: the slowest pair bounds the slot, and
/// lighter pairs idle until it finishes.
pub fn matching_time(net: &NetworkModel, m: &Matching) -> f64 {
    m.tokens()
        .iter()
        .map(|&t| wire_time(net, t))
        .fold(0.0, f64::max)
}

/// Reads a profiling CSV with header `batch,seconds` into a table model.
pub fn load_profile(path: &Path) -> Result<ComputeModel, CostModelError> {
    let text = fs::read_to_string(path).map_err(|e| CostModelError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "batch,seconds" => {}
        _ => {
            return Err(CostModelError::Parse {
                row: 1,
                msg: "expected header `batch,seconds`".into(),
            })
        }
    }
    let mut rows = Vec::new();
    let mut file_rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row_no = idx + 1;
        let mut cells = line.split(',');
        let (batch, seconds) = match (cells.next(), cells.next(), cells.next()) {
            (Some(b), Some(s), None) => (b.trim(), s.trim()),
            _ => {
                return Err(CostModelError::Parse {
                    row: row_no,
                    msg: "expected exactly 2 cells".into(),
                })
            }
        };
        let batch: u64 = batch.parse().map_err(|_| CostModelError::Parse {
            row: row_no,
            msg: format!("invalid batch `{batch}`"),
        })?;
        let seconds: f64 = seconds.parse().map_err(|_| CostModelError::Parse {
            row: row_no,
            msg: format!("invalid seconds `{seconds}`"),
        })?;
        rows.push(ProfileRow { batch, seconds });
        file_rows.push(row_no);
    }
    // report violations against file line numbers, not table indices
    ComputeModel::table(rows).map_err(|e| match e {
        CostModelError::NotMonotonic { row, msg } => CostModelError::NotMonotonic {
            row: file_rows[row - 1],
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Permutation;
    use proptest::prelude::*;

    #[test]
    fn knee_anchor_points() {
        let m = ComputeModel::knee_default();
        assert_eq!(compute_time(&m, 64), 250e-6);
        assert_eq!(compute_time(&m, 256), 250e-6);
        assert_eq!(compute_time(&m, 512), 500e-6);
        assert_eq!(compute_time(&m, 0), 0.0);
    }

    #[test]
    fn zero_batch_costs_zero_for_all_kinds() {
        let table = ComputeModel::table(vec![ProfileRow { batch: 16, seconds: 1e-4 }]).unwrap();
        for m in [
            ComputeModel::linear(1e-6).unwrap(),
            ComputeModel::knee_default(),
            table,
        ] {
            assert_eq!(compute_time(&m, 0), 0.0);
        }
    }

    #[test]
    fn table_interpolates_and_extrapolates() {
        let m = ComputeModel::table(vec![
            ProfileRow { batch: 256, seconds: 250e-6 },
            ProfileRow { batch: 512, seconds: 500e-6 },
        ])
        .unwrap();
        assert!((compute_time(&m, 384) - 375e-6).abs() < 1e-12);
        // plateau below the first row
        assert_eq!(compute_time(&m, 10), 250e-6);
        // last-segment slope above the last row
        assert!((compute_time(&m, 768) - 750e-6).abs() < 1e-12);
    }

    #[test]
    fn single_row_table_is_flat() {
        let m = ComputeModel::table(vec![ProfileRow { batch: 100, seconds: 2e-4 }]).unwrap();
        assert_eq!(compute_time(&m, 1), 2e-4);
        assert_eq!(compute_time(&m, 100), 2e-4);
        assert_eq!(compute_time(&m, 100_000), 2e-4);
    }

    #[test]
    fn unsorted_table_rejected() {
        let err = ComputeModel::table(vec![
            ProfileRow { batch: 512, seconds: 5e-4 },
            ProfileRow { batch: 256, seconds: 2e-4 },
        ])
        .unwrap_err();
        assert!(matches!(err, CostModelError::NotMonotonic { row: 2, .. }));
    }

    #[test]
    fn wire_time_examples() {
        let net = NetworkModel {
            bandwidth: 100e9,
            bytes_per_token: 4096.0,
            reconfig_delay: 0.0,
        };
        assert_eq!(wire_time(&net, 0), 0.0);
        assert!((wire_time(&net, 1000) - 40.96e-6).abs() < 1e-15);
        let double = NetworkModel { bandwidth: 200e9, ..net.clone() };
        assert_eq!(wire_time(&double, 1000), wire_time(&net, 1000) / 2.0);
    }

    #[test]
    fn matching_time_is_bottleneck_pair() {
        let net = NetworkModel {
            bandwidth: 1.0,
            bytes_per_token: 1.0,
            reconfig_delay: 0.0,
        };
        let m = Matching::new(Permutation::new(vec![1, 0]).unwrap(), vec![10, 1], None).unwrap();
        assert_eq!(matching_time(&net, &m), 10.0);
        let uniform =
            Matching::new(Permutation::new(vec![1, 0]).unwrap(), vec![4, 4], None).unwrap();
        assert_eq!(matching_time(&net, &uniform), 4.0);
    }

    #[test]
    fn profile_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("prof.csv");
        std::fs::write(&p, "batch,seconds\n256,250e-6\n512,500e-6\n").unwrap();
        let m = load_profile(&p).unwrap();
        assert!((compute_time(&m, 384) - 375e-6).abs() < 1e-12);

        std::fs::write(&p, "batch,seconds\n512,500e-6\n256,250e-6\n").unwrap();
        assert!(matches!(
            load_profile(&p),
            Err(CostModelError::NotMonotonic { row: 3, .. })
        ));

        std::fs::write(&p, "nope\n").unwrap();
        assert!(matches!(load_profile(&p), Err(CostModelError::Parse { row: 1, .. })));
    }

    proptest! {
        #[test]
        fn compute_time_nondecreasing(a in 0u64..5000, b in 0u64..5000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let table = ComputeModel::table(vec![
                ProfileRow { batch: 64, seconds: 1e-4 },
                ProfileRow { batch: 256, seconds: 2.5e-4 },
                ProfileRow { batch: 1024, seconds: 1e-3 },
            ]).unwrap();
            for m in [ComputeModel::linear(2e-6).unwrap(), ComputeModel::knee_default(), table] {
                prop_assert!(compute_time(&m, lo) <= compute_time(&m, hi));
            }
        }

        #[test]
        fn knee_regions_exact(b in 1u64..4096) {
            let m = ComputeModel::knee_default();
            let per_token = 250e-6 / 256.0;
            if b <= 256 {
                prop_assert_eq!(compute_time(&m, b), 250e-6);
            } else {
                prop_assert_eq!(compute_time(&m, b), per_token * b as f64);
            }
        }

        #[test]
        fn wire_time_homogeneous(tokens in 0u64..100_000, k in 1u64..64) {
            let net = NetworkModel::default();
            let scaled = wire_time(&net, tokens * k);
            prop_assert!((scaled - wire_time(&net, tokens) * k as f64).abs() <= 1e-9 * scaled.abs().max(1e-30));
        }

        #[test]
        fn knee_is_inhomogeneous_below_knee(b in 1u64..128) {
            // doubling a sub-knee batch does not double its cost
            let m = ComputeModel::knee_default();
            prop_assert!(compute_time(&m, 2 * b) < 2.0 * compute_time(&m, b));
        }
    }
}
