//! Compressed-sparse-column matrices and SPD factorizations.
//!
//! Assembly, slicing and products are done on a small owned CSC type; the
//! factorizations are delegated to `faer` (supernodal sparse Cholesky with a
//! fill-reducing ordering, dense Cholesky for the small blocks).

use std::sync::atomic::{AtomicUsize, Ordering};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Llt as SparseLlt;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Mat, MatMut, MatRef, Side};
use thiserror::Error;

/// Failure modes of a symmetric positive definite solve.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    /// The factorization hit a negative pivot and a diagonal shift does not
    /// repair it: the matrix is indefinite.
    #[error("matrix is not positive definite (factorization failed near pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    /// The matrix is positive semidefinite with a (numerical) null space.
    #[error("matrix is singular: {reason}")]
    Singular { reason: String },
    #[error("dimension mismatch: matrix is {rows}x{cols}, right-hand side has {rhs} rows")]
    Dimension { rows: usize, cols: usize, rhs: usize },
}

/// Owned CSC matrix with sorted, duplicate-free row indices in every column.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from raw parts. Rows inside each column must be strictly
    /// increasing.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(col_ptr.len(), ncols + 1);
        assert_eq!(row_idx.len(), values.len());
        assert_eq!(*col_ptr.last().unwrap(), row_idx.len());
        for c in 0..ncols {
            let rows = &row_idx[col_ptr[c]..col_ptr[c + 1]];
            assert!(rows.windows(2).all(|w| w[0] < w[1]), "unsorted column {c}");
            assert!(rows.last().map_or(true, |&r| r < nrows));
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Sums duplicate entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols + 1];
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            counts[c + 1] += 1;
        }
        for c in 0..ncols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            rows[next[c]] = r;
            vals[next[c]] = v;
            next[c] += 1;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut order: Vec<usize> = Vec::new();
        for c in 0..ncols {
            order.clear();
            order.extend(counts[c]..counts[c + 1]);
            order.sort_by_key(|&k| rows[k]);
            for &k in &order {
                if row_idx.len() > col_ptr[c] && *row_idx.last().unwrap() == rows[k] {
                    *values.last_mut().unwrap() += vals[k];
                } else {
                    row_idx.push(rows[k]);
                    values.push(vals[k]);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn from_dense(m: MatRef<'_, f64>) -> Self {
        let mut trips = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v != 0.0 {
                    trips.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trips)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(row, value)` over the stored entries of column `c`.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[range.clone()].binary_search(&r) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    /// Position of `(r, c)` in the value array, if stored.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()]
            .binary_search(&r)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `y += alpha * A x`
    pub fn mul_vec_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[k]] += self.values[k] * xc;
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_acc(1.0, x, &mut y);
        y
    }

    /// `y += alpha * Aᵀ x`
    pub fn tr_mul_vec_acc(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut s = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                s += self.values[k] * x[self.row_idx[k]];
            }
            y[c] += alpha * s;
        }
    }

    /// Dense product `A X`.
    pub fn mul_dense(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = Mat::<f64>::zeros(self.nrows, x.ncols());
        for j in 0..x.ncols() {
            let col = out.col_mut(j).try_as_col_major_mut().unwrap().as_slice_mut();
            for c in 0..self.ncols {
                let xc = x[(c, j)];
                if xc == 0.0 {
                    continue;
                }
                for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                    col[self.row_idx[k]] += self.values[k] * xc;
                }
            }
        }
        out
    }

    /// Dense product `Aᵀ X`.
    pub fn tr_mul_dense(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        assert_eq!(x.nrows(), self.nrows);
        Mat::from_fn(self.ncols, x.ncols(), |c, j| {
            let mut s = 0.0;
            for k in self.col_ptr[c]..self.col_ptr[c + 1] {
                s += self.values[k] * x[(self.row_idx[k], j)];
            }
            s
        })
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut trips = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for (r, v) in self.col(c) {
                trips.push((c, r, v));
            }
        }
        Self::from_triplets(self.ncols, self.nrows, &trips)
    }

    /// `Σ αₖ Aₖ`. Fast path when every term shares one sparsity pattern.
    pub fn linear_combination(terms: &[(f64, &CscMatrix)]) -> CscMatrix {
        assert!(!terms.is_empty());
        let first = terms[0].1;
        let same_pattern = terms.iter().all(|(_, m)| {
            m.nrows == first.nrows
                && m.ncols == first.ncols
                && m.col_ptr == first.col_ptr
                && m.row_idx == first.row_idx
        });
        if same_pattern {
            let mut values = vec![0.0; first.nnz()];
            for (alpha, m) in terms {
                for (v, mv) in values.iter_mut().zip(&m.values) {
                    *v += alpha * mv;
                }
            }
            return Self {
                nrows: first.nrows,
                ncols: first.ncols,
                col_ptr: first.col_ptr.clone(),
                row_idx: first.row_idx.clone(),
                values,
            };
        }
        let mut trips = Vec::new();
        for (alpha, m) in terms {
            assert_eq!((m.nrows, m.ncols), (first.nrows, first.ncols));
            for c in 0..m.ncols {
                for (r, v) in m.col(c) {
                    trips.push((r, c, alpha * v));
                }
            }
        }
        Self::from_triplets(first.nrows, first.ncols, &trips)
    }

    /// Extracts `A[rows, cols]`; entry `(a, b)` of the result is
    /// `A[rows[a], cols[b]]`.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> CscMatrix {
        let mut row_map = vec![usize::MAX; self.nrows];
        for (new, &old) in rows.iter().enumerate() {
            row_map[old] = new;
        }
        let mut col_ptr = Vec::with_capacity(cols.len() + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut buf: Vec<(usize, f64)> = Vec::new();
        for &old_c in cols {
            buf.clear();
            for (r, v) in self.col(old_c) {
                let nr = row_map[r];
                if nr != usize::MAX {
                    buf.push((nr, v));
                }
            }
            buf.sort_by_key(|e| e.0);
            for &(r, v) in &buf {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows: rows.len(),
            ncols: cols.len(),
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for (r, v) in self.col(c) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diagonal(&self) -> f64 {
        (0..self.nrows.min(self.ncols)).fold(0.0, |m, i| m.max(self.get(i, i).abs()))
    }

    /// Largest `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.ncols {
            for (r, v) in self.col(c) {
                worst = worst.max((v - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn as_faer(&self) -> SparseColMatRef<'_, usize, f64> {
        let symbolic = SymbolicSparseColMatRef::new_checked(
            self.nrows,
            self.ncols,
            &self.col_ptr,
            None,
            &self.row_idx,
        );
        SparseColMatRef::new(symbolic, &self.values)
    }
}

/// Sparse Cholesky factorization kept for repeated solves.
///
/// Every right-hand-side column pushed through [`SpdFactor::solve_in_place`]
/// is counted, so callers can audit how many solves an online stage costs.
pub struct SpdFactor {
    n: usize,
    llt: Option<SparseLlt<usize, f64>>,
    solves: AtomicUsize,
}

impl std::fmt::Debug for SpdFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpdFactor")
            .field("n", &self.n)
            .field("solves", &self.solve_count())
            .finish()
    }
}

impl SpdFactor {
    pub fn new(a: &CscMatrix) -> Result<Self, SolveError> {
        assert_eq!(a.nrows(), a.ncols(), "factorization needs a square matrix");
        let n = a.nrows();
        if n == 0 {
            return Ok(Self {
                n,
                llt: None,
                solves: AtomicUsize::new(0),
            });
        }
        match a.as_faer().sp_cholesky(Side::Lower) {
            Ok(llt) => Ok(Self {
                n,
                llt: Some(llt),
                solves: AtomicUsize::new(0),
            }),
            Err(err) => Err(classify_failure(a, err)),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, mut rhs: MatMut<'_, f64>) {
        assert_eq!(rhs.nrows(), self.n);
        self.solves.fetch_add(rhs.ncols(), Ordering::Relaxed);
        if let Some(llt) = &self.llt {
            llt.solve_in_place(rhs.as_mut());
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_in_place(x.as_mut());
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn reset_solve_count(&self) {
        self.solves.store(0, Ordering::Relaxed);
    }
}

fn classify_failure(a: &CscMatrix, err: faer::sparse::linalg::LltError) -> SolveError {
    let pivot = match err {
        faer::sparse::linalg::LltError::Numeric(
            faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index },
        ) => index,
        _ => 0,
    };
    // A tiny diagonal shift rescues a semidefinite matrix but not an
    // indefinite one.
    let shift = 1e-10 * a.max_abs_diagonal().max(f64::MIN_POSITIVE);
    let shifted = CscMatrix::linear_combination(&[(1.0, a), (shift, &CscMatrix::identity(a.nrows()))]);
    if shifted.as_faer().sp_cholesky(Side::Lower).is_ok() {
        SolveError::Singular {
            reason: format!("zero pivot near index {pivot}"),
        }
    } else {
        SolveError::NotPositiveDefinite { pivot }
    }
}

/// Dense Cholesky factorization of a small SPD block.
pub struct DenseSpd {
    llt: faer::linalg::solvers::Llt<f64>,
    n: usize,
}

impl DenseSpd {
    /// Pivots below `rel_tol · max diag` are treated as a null space.
    pub fn new(a: MatRef<'_, f64>, rel_tol: f64) -> Result<Self, SolveError> {
        let n = a.nrows();
        assert_eq!(n, a.ncols());
        let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)].abs()));
        let llt = match a.llt(Side::Lower) {
            Ok(llt) => llt,
            Err(faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index }) => {
                let shift = 1e-10 * max_diag.max(f64::MIN_POSITIVE);
                let shifted = Mat::from_fn(n, n, |i, j| a[(i, j)] + if i == j { shift } else { 0.0 });
                return Err(if shifted.llt(Side::Lower).is_ok() {
                    SolveError::Singular {
                        reason: format!("zero pivot at index {index}"),
                    }
                } else {
                    SolveError::NotPositiveDefinite { pivot: index }
                });
            }
        };
        let l = llt.L();
        for i in 0..n {
            let pivot = l[(i, i)] * l[(i, i)];
            if pivot <= rel_tol * max_diag {
                return Err(SolveError::Singular {
                    reason: format!("pivot {pivot:.3e} at index {i} below {rel_tol:.1e} x max diagonal {max_diag:.3e}"),
                });
            }
        }
        Ok(Self { llt, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, rhs: MatMut<'_, f64>) {
        if self.n > 0 {
            self.llt.solve_in_place(rhs);
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        self.solve_in_place(x.as_mut());
        (0..b.len()).map(|i| x[(i, 0)]).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Copies column `j` of a dense matrix into a vector.
pub fn col_to_vec(m: MatRef<'_, f64>, j: usize) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn mat_from_columns(nrows: usize, cols: &[Vec<f64>]) -> Mat<f64> {
    Mat::from_fn(nrows, cols.len(), |i, j| cols[j][i])
}

/// Replaces `m` by `(m + mᵀ)/2`.
pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn dense_max_abs(m: MatRef<'_, f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            worst = worst.max(m[(i, j)].abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_sort() {
        let a = CscMatrix::from_triplets(2, 2, &[(1, 0, 1.0), (0, 0, 2.0), (1, 0, 3.0), (1, 1, 5.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(1, 0), 4.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.row_idx(), &[0, 1, 1]);
    }

    #[test]
    fn submatrix_reorders() {
        let a = CscMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0), (2, 0, 7.0)]);
        let s = a.submatrix(&[2, 0], &[0, 2]);
        assert_eq!(s.get(0, 0), 7.0);
        assert_eq!(s.get(1, 0), 1.0);
        assert_eq!(s.get(0, 1), 3.0);
    }

    #[test]
    fn factor_solves_two_by_two() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 2.0), (1, 0, 1.0), (0, 1, 1.0), (1, 1, 2.0)]);
        let f = SpdFactor::new(&a).unwrap();
        let x = f.solve(&[1.0, 1.0]);
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.solve_count(), 1);
    }

    #[test]
    fn singular_and_indefinite_are_distinguished() {
        let singular = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)]);
        let indefinite = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 1, -1.0)]);
        match SpdFactor::new(&singular) {
            Err(SolveError::Singular { .. }) => {}
            Ok(_) => {} // rounding may leave a tiny positive pivot; the residual check catches that
            Err(e) => panic!("unexpected {e:?}"),
        }
        assert!(matches!(SpdFactor::new(&indefinite), Err(SolveError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn dense_spd_flags_rank_deficiency() {
        let m = Mat::from_fn(2, 2, |_, _| 1.0);
        assert!(matches!(DenseSpd::new(m.as_ref(), 1e-12), Err(SolveError::Singular { .. })));
    }
}
