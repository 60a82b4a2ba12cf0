//! Discrete algebraic Riccati equation via fixed-point iteration.

use super::{relative_asymmetry, Matrix, NumericsError};
use nalgebra::Cholesky;

const MAX_ITERS: usize = 10_000;
const RESIDUAL_TOL: f64 = 1e-10;

/// Solves the discrete algebraic Riccati equation for a controllable pair
/// `(A, B)` with weights `Q ≻ 0`, `R ≻ 0` and returns `(P, K)` where
/// `K = −(R + BᵀPB)⁻¹BᵀPA` and `P` satisfies
/// `(A+BK)ᵀP(A+BK) − P + Q + KᵀRK = 0` up to a residual of `1e-10`.
///
/// The fixed-point (value) iteration starts at `P = Q` and runs until the
/// update stalls at machine precision or the iteration cap is hit.
pub fn solve_dare(
    a: &Matrix,
    b: &Matrix,
    q: &Matrix,
    r: &Matrix,
) -> Result<(Matrix, Matrix), NumericsError> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n {
        return Err(NumericsError::Dimension("A must be square".into()));
    }
    if b.nrows() != n {
        return Err(NumericsError::Dimension(format!(
            "B has {} rows, expected {n}",
            b.nrows()
        )));
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(NumericsError::Dimension("Q must match the state dimension".into()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(NumericsError::Dimension("R must match the input dimension".into()));
    }
    for (mat, _name) in [(a, "A"), (b, "B"), (q, "Q"), (r, "R")] {
        if mat.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("solve_dare input"));
        }
    }
    if relative_asymmetry(q) > 1e-10 || relative_asymmetry(r) > 1e-10 {
        return Err(NumericsError::NotSymmetric(
            relative_asymmetry(q).max(relative_asymmetry(r)),
        ));
    }
    if Cholesky::new(q.clone()).is_none() || Cholesky::new(r.clone()).is_none() {
        return Err(NumericsError::NotPositiveDefinite);
    }

    let mut p = q.clone();
    let mut step = f64::INFINITY;
    let mut converged = false;
    for _ in 0..MAX_ITERS {
        let btp = b.transpose() * &p;
        let gain_lhs = r + &btp * b;
        let chol = Cholesky::new(gain_lhs).ok_or(NumericsError::NotPositiveDefinite)?;
        // P' = AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA + Q
        let btpa = &btp * a;
        let atp = a.transpose() * &p;
        let mut next = &atp * a - atp * b * chol.solve(&btpa) + q;
        next = (&next + next.transpose()) * 0.5;
        step = (&next - &p).norm();
        p = next;
        if !step.is_finite() {
            return Err(NumericsError::DareDiverged { residual: step });
        }
        if step <= 1e-14 * p.norm().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::DareDiverged { residual: step });
    }

    let btp = b.transpose() * &p;
    let chol = Cholesky::new(r + &btp * b).ok_or(NumericsError::NotPositiveDefinite)?;
    let k = -chol.solve(&(&btp * a));

    // Validate against the closed-loop Lyapunov form of the equation.
    let acl = a + b * &k;
    let residual = (acl.transpose() * &p * &acl - &p + q + k.transpose() * r * &k).norm();
    if residual > RESIDUAL_TOL {
        return Err(NumericsError::DareInvalid(format!(
            "closed-loop residual {residual:.3e} exceeds {RESIDUAL_TOL:.1e}"
        )));
    }
    if Cholesky::new(p.clone()).is_none() {
        return Err(NumericsError::DareInvalid("P is not positive definite".into()));
    }
    Ok((p, k))
}
