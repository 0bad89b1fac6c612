//! Dense square matrices of reals, row-major.
//!
//! Token-count matrices live in [`crate::traffic::TrafficMatrix`]; this type
//! carries everything that happens after normalization moves to reals.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

/// Square `f64` matrix with flat row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n > 0, "matrix dimension must be positive");
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds from nested rows. Panics if the rows are ragged or empty.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        assert!(n > 0, "matrix dimension must be positive");
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            assert_eq!(row.len(), n, "ragged rows in square matrix");
            data.extend_from_slice(row);
        }
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.n..(s + 1) * self.n]
    }

    pub fn row_sum(&self, s: usize) -> f64 {
        self.row(s).iter().sum()
    }

    pub fn col_sum(&self, d: usize) -> f64 {
        (0..self.n).map(|s| self[(s, d)]).sum()
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.n);
        for s in 0..self.n {
            for d in 0..self.n {
                out[(d, s)] = self[(s, d)];
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }
}

impl Index<(usize, usize)> for SquareMatrix {
    type Output = f64;

    fn index(&self, (s, d): (usize, usize)) -> &f64 {
        &self.data[s * self.n + d]
    }
}

impl IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (s, d): (usize, usize)) -> &mut f64 {
        &mut self.data[s * self.n + d]
    }
}
