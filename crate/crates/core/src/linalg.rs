//! Small dense solvers shared by the block updates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Solver for a symmetric positive-definite system. Falls back to LU and
/// then to a least-squares solve when the matrix is numerically singular.
pub(crate) enum SpdSolver {
    Cholesky(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    Svd(nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl SpdSolver {
    pub(crate) fn new(m: DMatrix<f64>) -> Self {
        match nalgebra::Cholesky::new(m.clone()) {
            Some(c) => SpdSolver::Cholesky(c),
            None => {
                let lu = m.clone().lu();
                if lu.is_invertible() {
                    SpdSolver::Lu(lu)
                } else {
                    SpdSolver::Svd(m.svd(true, true))
                }
            }
        }
    }

    pub(crate) fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdSolver::Cholesky(c) => c.solve(b),
            SpdSolver::Lu(lu) => lu.solve(b).unwrap_or_else(|| DVector::zeros(b.len())),
            SpdSolver::Svd(svd) => svd
                .solve(b, 1e-14 * svd.singular_values.max())
                .unwrap_or_else(|_| DVector::zeros(b.len())),
        }
    }
}

/// Eigendecomposition `C = Q D Qᵀ` of a symmetric matrix, reused to solve
/// `(C + cI) x = b` for many shifts `c`.
#[derive(Debug, Clone)]
pub(crate) struct ShiftedSolver {
    q: DMatrix<f64>,
    d: DVector<f64>,
}

impl ShiftedSolver {
    pub(crate) fn new(c: DMatrix<f64>) -> Self {
        let sym = (&c + c.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        Self {
            q: eig.eigenvectors,
            d: eig.eigenvalues,
        }
    }

    pub(crate) fn solve(&self, shift: f64, b: &DVector<f64>) -> DVector<f64> {
        let mut qb = self.q.tr_mul(b);
        let scale = self.d.amax().max(shift.abs()).max(f64::MIN_POSITIVE);
        for (v, d) in qb.iter_mut().zip(self.d.iter()) {
            let denom = d + shift;
            *v = if denom.abs() > 1e-14 * scale { *v / denom } else { 0.0 };
        }
        &self.q * qb
    }
}
