//! Sparse linear systems and direct solves.
//!
//! Assembly accumulates (row, col, value) triplets; duplicates are summed
//! when the matrix is compressed. Factorizations are sparse LU with partial
//! pivoting and are immutable once computed, so one factorization can serve
//! many right-hand sides (constant-matrix time loops factor once).

use faer::prelude::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};

use crate::error::{Error, Result};

/// A square sparse system `A x = b` under assembly.
#[derive(Clone, Debug)]
pub struct SparseSystem {
    n: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    pub fn new(n: usize) -> Self {
        SparseSystem { n, triplets: Vec::new(), rhs: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.triplets.len()
    }

    /// Accumulate `A[row, col] += value`.
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n && col < self.n);
        self.triplets.push(Triplet::new(row, col, value));
    }

    pub fn add_rhs(&mut self, row: usize, value: f64) {
        self.rhs[row] += value;
    }

    /// Replace each listed row by the identity row with the given right-hand
    /// side value (strong Dirichlet enforcement by row replacement).
    pub fn replace_rows_with_identity(&mut self, rows: &[(usize, f64)]) {
        if rows.is_empty() {
            return;
        }
        let mut constrained = vec![false; self.n];
        for &(r, _) in rows {
            constrained[r] = true;
        }
        self.triplets.retain(|t| !constrained[t.row]);
        for &(r, value) in rows {
            self.triplets.push(Triplet::new(r, r, 1.0));
            self.rhs[r] = value;
        }
    }

    /// `y = A x` straight off the triplets.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for t in &self.triplets {
            y[t.row] += t.val * x[t.col];
        }
        y
    }

    fn compress(&self) -> Result<SparseColMat<usize, f64>> {
        SparseColMat::try_new_from_triplets(self.n, self.n, &self.triplets)
            .map_err(|e| Error::LinearSolve(format!("could not compress triplets: {e:?}")))
    }

    /// Factor the current matrix. The factorization is independent of the
    /// stored right-hand side.
    pub fn factor(&self) -> Result<LuFactor> {
        let mat = self.compress()?;
        let symbolic = SymbolicLu::try_new(mat.symbolic())
            .map_err(|e| Error::LinearSolve(format!("symbolic LU failed: {e:?}")))?;
        // faer's simplicial LU panics on an exactly zero pivot instead of
        // returning an error; translate that into a solver error.
        let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            Lu::try_new_with_symbolic(symbolic, mat.as_ref())
        }))
        .map_err(|_| {
            Error::LinearSolve("pivot failure during LU factorization (matrix is singular)".into())
        })?
        .map_err(|e| Error::LinearSolve(format!("LU factorization failed: {e:?}")))?;
        Ok(LuFactor { lu, n: self.n })
    }

    /// Factor and solve against the stored right-hand side.
    pub fn solve(&self) -> Result<Vec<f64>> {
        self.factor()?.solve(&self.rhs)
    }
}

/// An immutable sparse LU factorization.
pub struct LuFactor {
    lu: Lu<usize, f64>,
    n: usize,
}

impl LuFactor {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::invalid(format!(
                "rhs length {} does not match system dimension {}",
                rhs.len(),
                self.n
            )));
        }
        let mut x = faer::Mat::<f64>::zeros(self.n, 1);
        for (i, &v) in rhs.iter().enumerate() {
            x[(i, 0)] = v;
        }
        let solved = self.lu.solve(&x);
        let mut out = vec![0.0; self.n];
        for (i, o) in out.iter_mut().enumerate() {
            let v: f64 = solved[(i, 0)];
            if !v.is_finite() {
                return Err(Error::LinearSolve(
                    "solution contains non-finite entries (matrix is singular or \
                     severely ill-conditioned)"
                        .into(),
                ));
            }
            *o = v;
        }
        Ok(out)
    }
}
