//! Compressed sparse row operators.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    Symmetric,
    General,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseOperator {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    symmetry: Symmetry,
}

impl SparseOperator {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed in
    /// insertion order, so identical insertion sequences give identical bits.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut op = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
            symmetry: Symmetry::General,
        };
        op.symmetry = op.detect_symmetry();
        op
    }

    pub fn identity(n: usize) -> Self {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let rows = a.len();
        let cols = a.first().map_or(0, |r| r.len());
        let mut t = Vec::new();
        for (i, row) in a.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    t.push((i, j, v));
                }
            }
        }
        Self::from_triplets(rows, cols, t)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn symmetry(&self) -> Symmetry {
        self.symmetry
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .cloned()
            .zip(self.values[range].iter().cloned())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(pos) => self.values[range.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.push((r, c, v));
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *out = acc;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_into(x, &mut y);
        y
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.matvec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn transpose(&self) -> Self {
        let t = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, t)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= s;
        }
        out
    }

    /// `alpha * A + beta * B` over the union pattern.
    pub fn linear_combination(alpha: f64, a: &Self, beta: f64, b: &Self) -> Result<Self> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(LabError::DimensionMismatch {
                expected: a.rows,
                got: b.rows,
            });
        }
        let mut t: Vec<(usize, usize, f64)> = a.triplets().into_iter().map(|(r, c, v)| (r, c, alpha * v)).collect();
        t.extend(b.triplets().into_iter().map(|(r, c, v)| (r, c, beta * v)));
        Ok(Self::from_triplets(a.rows, a.cols, t))
    }

    /// Entries only on the three central diagonals.
    pub fn is_tridiagonal(&self) -> bool {
        self.rows == self.cols && self.triplets().iter().all(|&(r, c, _)| r.abs_diff(c) <= 1)
    }

    /// Sub-, main and super-diagonal of a square operator.
    pub fn tridiagonal_bands(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.rows;
        let lower = (1..n).map(|i| self.get(i, i - 1)).collect();
        let diag = (0..n).map(|i| self.get(i, i)).collect();
        let upper = (0..n.saturating_sub(1)).map(|i| self.get(i, i + 1)).collect();
        (lower, diag, upper)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cols]; self.rows];
        for (r, c, v) in self.triplets() {
            out[r][c] = v;
        }
        out
    }

    fn detect_symmetry(&self) -> Symmetry {
        if self.rows != self.cols {
            return Symmetry::General;
        }
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                if self.get(c, r) != v {
                    return Symmetry::General;
                }
            }
        }
        Symmetry::Symmetric
    }

    /// Matrix Market coordinate format (1-based indices).
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::new();
        s.push_str("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.rows, self.cols, self.nnz());
        for (r, c, v) in self.triplets() {
            let _ = writeln!(s, "{} {} {:e}", r + 1, c + 1, v);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadProvenance {
    DivergenceF,
    WeightedF,
    Combined,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadVector {
    pub values: Vec<f64>,
    pub provenance: LoadProvenance,
}

impl LoadVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            values: vec![0.0; n],
            provenance: LoadProvenance::Combined,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let a = SparseOperator::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, 2.0), (0, 0, 3.0), (0, 1, -1.0)]);
        assert_eq!(a.get(0, 0), 4.0);
        assert_eq!(a.get(0, 1), -1.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.symmetry(), Symmetry::General);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, 2.0]);
    }

    #[test]
    fn transpose_and_symmetry() {
        let a = SparseOperator::from_dense(&[vec![2.0, 1.0], vec![0.0, 2.0]]);
        let at = a.transpose();
        assert_eq!(at.to_dense(), vec![vec![2.0, 0.0], vec![1.0, 2.0]]);
        let s = SparseOperator::linear_combination(1.0, &a, 1.0, &at).unwrap();
        assert_eq!(s.symmetry(), Symmetry::Symmetric);
        assert!(a.is_tridiagonal());
    }

    #[test]
    fn matrix_market_header() {
        let a = SparseOperator::identity(3);
        let mm = a.to_matrix_market();
        let mut lines = mm.lines();
        assert_eq!(lines.next(), Some("%%MatrixMarket matrix coordinate real general"));
        assert_eq!(lines.next(), Some("3 3 3"));
        assert_eq!(lines.next(), Some("1 1 1e0"));
    }
}
