//! Symmetric sparse matrices in compressed row form.
//!
//! Similarity graphs and precision matrices are symmetric with a few
//! nonzeros per row, so both triangles are stored explicitly and rows
//! are kept sorted by column. Entries are inserted once per unordered
//! pair; the mirror entry is materialized by the constructor, which
//! keeps symmetry exact by construction rather than by tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("matrix dimension must be positive")]
    EmptyDimension,
    #[error("entry ({row}, {col}) out of bounds for dimension {n}")]
    OutOfBounds { row: usize, col: usize, n: usize },
    #[error("duplicate entry at ({row}, {col})")]
    Duplicate { row: usize, col: usize },
    #[error("entry ({row}, {col}) = {value} is not finite")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("entries ({row}, {col}) = {value} and mirror {mirror} break symmetry")]
    Asymmetric {
        row: usize,
        col: usize,
        value: f64,
        mirror: f64,
    },
    #[error("similarity weight at ({row}, {col}) = {value} is negative")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("similarity matrix stores a diagonal entry at {row}")]
    DiagonalEntry { row: usize },
}

/// Symmetric `n x n` sparse matrix; both triangles stored, rows sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetricSparse {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricSparse {
    /// Builds from unordered unique entries. Each `(i, j, v)` with
    /// `i != j` is stored together with its mirror `(j, i, v)`;
    /// diagonal entries are stored once. Listing both `(i, j)` and
    /// `(j, i)` is a duplicate.
    pub fn from_entries(
        n: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self, SparseError> {
        if n == 0 {
            return Err(SparseError::EmptyDimension);
        }
        let mut triplets = Vec::with_capacity(entries.len() * 2);
        for &(i, j, v) in entries {
            if i >= n || j >= n {
                return Err(SparseError::OutOfBounds { row: i, col: j, n });
            }
            if !v.is_finite() {
                return Err(SparseError::NonFinite { row: i, col: j, value: v });
            }
            triplets.push((i, j, v));
            if i != j {
                triplets.push((j, i, v));
            }
        }
        triplets.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        for w in triplets.windows(2) {
            if (w[0].0, w[0].1) == (w[1].0, w[1].1) {
                return Err(SparseError::Duplicate { row: w[0].0, col: w[0].1 });
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &triplets {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Ok(Self { n, row_ptr, col_idx, values })
    }

    /// Builds from a dense matrix, keeping entries with `|a_ij| > 0`.
    /// Off-diagonal asymmetry beyond `sym_tol` (absolute) is rejected;
    /// within tolerance the upper-triangle value wins, so the result is
    /// exactly symmetric.
    pub fn from_dense(a: &DMatrix<f64>, sym_tol: f64) -> Result<Self, SparseError> {
        let n = a.nrows();
        if n == 0 {
            return Err(SparseError::EmptyDimension);
        }
        assert_eq!(a.ncols(), n, "matrix must be square");
        let mut entries = Vec::new();
        for i in 0..n {
            if a[(i, i)] != 0.0 {
                entries.push((i, i, a[(i, i)]));
            }
            for j in (i + 1)..n {
                let (v, m) = (a[(i, j)], a[(j, i)]);
                if (v - m).abs() > sym_tol {
                    return Err(SparseError::Asymmetric { row: i, col: j, value: v, mirror: m });
                }
                if v != 0.0 {
                    entries.push((i, j, v));
                }
            }
        }
        Self::from_entries(n, &entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of stored entries, mirrors included.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// All stored entries in row-major order, mirrors included.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// Strictly-upper entries `(i, j, v)` with `i < j`, one per pair.
    pub fn upper_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.iter().filter(|&(i, j, _)| i < j)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    /// Per-row sums over off-diagonal entries (node degrees for a
    /// weighted graph).
    pub fn off_diagonal_row_sums(&self) -> DVector<f64> {
        let mut sums = DVector::zeros(self.n);
        for (i, j, v) in self.iter() {
            if i != j {
                sums[i] += v;
            }
        }
        sums
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            a[(i, j)] = v;
        }
        a
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= c;
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n, "vector length must match dimension");
        let mut y = DVector::zeros(self.n);
        for (i, j, v) in self.iter() {
            y[i] += v * x[j];
        }
        y
    }

    /// Quadratic form of the graph Laplacian induced by this matrix's
    /// off-diagonal weights: `sum_{i<j} w_ij (x_i - x_j)^2`.
    pub fn laplacian_quad(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.n, "vector length must match dimension");
        self.upper_entries()
            .map(|(i, j, v)| {
                let d = x[i] - x[j];
                v * d * d
            })
            .sum()
    }

    /// Trace of `cov * Lap` where `Lap` is the Laplacian of this
    /// matrix's off-diagonal weights. Equals
    /// `sum_{i<j} w_ij (cov_ii + cov_jj - 2 cov_ij)` by symmetry, so it
    /// only touches `cov` on the sparsity pattern.
    pub fn laplacian_trace_product(&self, cov: &DMatrix<f64>) -> f64 {
        assert_eq!(cov.nrows(), self.n, "covariance dimension mismatch");
        self.upper_entries()
            .map(|(i, j, v)| v * (cov[(i, i)] + cov[(j, j)] - 2.0 * cov[(i, j)]))
            .sum()
    }

    /// Checks the extra conditions a similarity graph must satisfy:
    /// nonnegative weights and an empty diagonal.
    pub fn validate_similarity(&self) -> Result<(), SparseError> {
        for (i, j, v) in self.iter() {
            if i == j {
                return Err(SparseError::DiagonalEntry { row: i });
            }
            if v < 0.0 {
                return Err(SparseError::NegativeWeight { row: i, col: j, value: v });
            }
        }
        Ok(())
    }
}
