//! Exact maximum-weight assignment on a complete square weight matrix, plus
//! permutation extraction inside a boolean support mask.
//!
//! The solver is a shortest-augmenting-path implementation with dual
//! potentials (the Jonker-Volgenant family), O(n^3). Ties between optimal
//! assignments are broken by returning the lexicographically smallest
//! `dest_of` array; the tie set is recovered from the dual potentials via
//! complementary slackness, which is exact whenever the weights are
//! integer-valued.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::SquareMatrix;

#[derive(Debug, Error)]
pub enum AssignmentError {
    #[error("weight at ({0}, {1}) is not finite")]
    NonFinite(usize, usize),
    #[error("dest_of is not a bijection: {0}")]
    NotBijection(String),
}

/// A permutation of `n` ranks; `dest_of[s]` is the destination matched to
/// source `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    dest_of: Vec<usize>,
}

impl Permutation {
    pub fn new(dest_of: Vec<usize>) -> Result<Self, AssignmentError> {
        let n = dest_of.len();
        let mut seen = vec![false; n];
        for &d in &dest_of {
            if d >= n {
                return Err(AssignmentError::NotBijection(format!(
                    "destination {d} out of range for n = {n}"
                )));
            }
            if seen[d] {
                return Err(AssignmentError::NotBijection(format!(
                    "destination {d} appears twice"
                )));
            }
            seen[d] = true;
        }
        Ok(Self { dest_of })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            dest_of: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.dest_of.len()
    }

    pub fn dest(&self, s: usize) -> usize {
        self.dest_of[s]
    }

    pub fn dest_of(&self) -> &[usize] {
        &self.dest_of
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.dest_of.len()];
        for (s, &d) in self.dest_of.iter().enumerate() {
            inv[d] = s;
        }
        Self { dest_of: inv }
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = AssignmentError;

    fn try_from(dest_of: Vec<usize>) -> Result<Self, Self::Error> {
        Permutation::new(dest_of)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.dest_of
    }
}

/// Returns the permutation maximizing the sum of selected weights and that
/// maximum. Deterministic; among optimal permutations the lexicographically
/// smallest `dest_of` is returned (exact for integer-valued weights).
pub fn max_weight_assignment(w: &SquareMatrix) -> Result<(Permutation, f64), AssignmentError> {
    let n = w.n();
    for i in 0..n {
        for j in 0..n {
            if !w[(i, j)].is_finite() {
                return Err(AssignmentError::NonFinite(i, j));
            }
        }
    }
    let (assigned, u, v) = solve_min(n, &|i, j| -w[(i, j)]);

    // Complementary slackness: optimal assignments use only edges whose
    // reduced cost is zero. Matched edges are included regardless so the
    // solver's own answer always remains reachable.
    let mut tight = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            tight[i * n + j] = (-w[(i, j)] - u[i] - v[j]) == 0.0;
        }
    }
    for (i, &j) in assigned.iter().enumerate() {
        tight[i * n + j] = true;
    }
    let tight_count = tight.iter().filter(|&&t| t).count();

    let sum_along = |dest: &[usize]| -> f64 {
        dest.iter().enumerate().map(|(i, &j)| w[(i, j)]).sum()
    };
    let dest = if tight_count > n {
        let canonical = lex_min_matching(n, &tight);
        // Guard against float drift in the tight set: never trade weight
        // away for tie order.
        if sum_along(&canonical) >= sum_along(&assigned) {
            canonical
        } else {
            assigned
        }
    } else {
        assigned
    };
    let total = sum_along(&dest);
    Ok((Permutation::new(dest)?, total))
}

/// Finds a permutation using only `mask`-true cells, or `None` when the
/// support admits no perfect matching. Runs the weight solver on the 0/1
/// indicator and checks for a full-cardinality result.
pub fn support_perfect_matching<F>(n: usize, mask: F) -> Option<Permutation>
where
    F: Fn(usize, usize) -> bool,
{
    if n == 0 {
        return Some(Permutation { dest_of: vec![] });
    }
    let mut w = SquareMatrix::zeros(n);
    for s in 0..n {
        for d in 0..n {
            if mask(s, d) {
                w[(s, d)] = 1.0;
            }
        }
    }
    let (perm, weight) = max_weight_assignment(&w).expect("indicator weights are finite");
    if weight == n as f64 {
        Some(perm)
    } else {
        None
    }
}

/// Shortest-augmenting-path solver for the min-cost square assignment
/// problem with dual potentials. Returns (row -> col, row duals, col duals)
/// satisfying cost(i, j) >= u[i] + v[j] with equality on matched edges
/// (exactly so for integer costs).
fn solve_min(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based arrays with column 0 as the virtual free column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1]; // col -> row, 0 = free
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[matched_row[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching within a tight-edge graph
/// that is known to contain one: fix rows in order, committing the smallest
/// destination that keeps the remaining rows matchable.
fn lex_min_matching(n: usize, tight: &[bool]) -> Vec<usize> {
    let mut col_used = vec![false; n];
    let mut dest = vec![0usize; n];
    for i in 0..n {
        let mut committed = false;
        for j in 0..n {
            if !tight[i * n + j] || col_used[j] {
                continue;
            }
            col_used[j] = true;
            if rows_matchable(n, tight, i + 1, &col_used) {
                dest[i] = j;
                committed = true;
                break;
            }
            col_used[j] = false;
        }
        debug_assert!(committed, "tight graph lost its perfect matching");
        if !committed {
            // Unreachable when `tight` contains a perfect matching; keep a
            // total function regardless.
            let j = (0..n).find(|&j| !col_used[j]).unwrap();
            col_used[j] = true;
            dest[i] = j;
        }
    }
    dest
}

/// True iff rows `from..n` can be perfectly matched into unused columns.
fn rows_matchable(n: usize, tight: &[bool], from: usize, col_used: &[bool]) -> bool {
    let mut match_col: Vec<Option<usize>> = vec![None; n];
    for i in from..n {
        let mut visited = vec![false; n];
        if !augment(n, tight, col_used, i, &mut visited, &mut match_col) {
            return false;
        }
    }
    true
}

fn augment(
    n: usize,
    tight: &[bool],
    col_used: &[bool],
    row: usize,
    visited: &mut [bool],
    match_col: &mut [Option<usize>],
) -> bool {
    for j in 0..n {
        if col_used[j] || visited[j] || !tight[row * n + j] {
            continue;
        }
        visited[j] = true;
        let free = match match_col[j] {
            None => true,
            Some(r) => augment(n, tight, col_used, r, visited, match_col),
        };
        if free {
            match_col[j] = Some(row);
            return true;
        }
    }
    false
}
