//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! Everything here operates at desk scale (d ≤ a few hundred); clarity over
//! asymptotics.

use nalgebra::{DMatrix, DVector};

use crate::error::CoreError;
use crate::Result;

/// Relative eigenvalue floor for the SPD test: the smallest eigenvalue must
/// exceed `SPD_REL_TOL * trace`.
pub const SPD_REL_TOL: f64 = 1e-12;

/// Check that a symmetric matrix is positive definite under the relative
/// tolerance `min_eig > SPD_REL_TOL * trace`. Returns the eigenvalues on
/// success so callers can reuse them.
pub fn spd_check(mat: &DMatrix<f64>) -> Result<DVector<f64>> {
    let trace = mat.trace();
    let eigs = symmetric_eigenvalues(mat);
    let min_eig = eigs.min();
    if !(trace > 0.0) || !(min_eig > SPD_REL_TOL * trace) {
        return Err(CoreError::IndefiniteResult(format!(
            "min eigenvalue {min_eig:.3e} vs trace {trace:.3e}"
        )));
    }
    Ok(eigs)
}

/// Eigenvalues of a symmetric matrix (symmetrized first to kill round-off).
pub fn symmetric_eigenvalues(mat: &DMatrix<f64>) -> DVector<f64> {
    let sym = symmetrize(mat);
    sym.symmetric_eigenvalues()
}

/// (A + Aᵀ)/2.
pub fn symmetrize(mat: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (mat + mat.transpose())
}

/// Solve A x = b for symmetric positive definite A via Cholesky.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| CoreError::SingularHessian("Cholesky failed".into()))?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| CoreError::SingularHessian("Cholesky failed".into()))?;
    Ok(chol.inverse())
}

/// log|A| for symmetric positive definite A.
pub fn spd_log_det(a: &DMatrix<f64>) -> Result<f64> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| CoreError::SingularHessian("Cholesky failed".into()))?;
    Ok(2.0 * chol.l().diagonal().map(f64::ln).sum())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn spd_cholesky_l(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| CoreError::SingularHessian("Cholesky failed".into()))?;
    Ok(chol.l())
}

/// ‖v‖∞.
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Condition number (ratio of extreme eigenvalues) of a symmetric matrix.
pub fn sym_condition_number(mat: &DMatrix<f64>) -> f64 {
    let eigs = symmetric_eigenvalues(mat);
    let max = eigs.max();
    let min = eigs.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_check_accepts_identity_rejects_indefinite() {
        let id = DMatrix::identity(3, 3);
        assert!(spd_check(&id).is_ok());
        let mut bad = DMatrix::identity(3, 3);
        bad[(2, 2)] = -0.5;
        assert!(spd_check(&bad).is_err());
    }

    #[test]
    fn spd_solve_matches_direct() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = spd_solve(&a, &b).unwrap();
        let back = &a * &x;
        assert!((back - b).amax() < 1e-12);
    }
}
