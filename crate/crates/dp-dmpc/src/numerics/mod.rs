//! Dense linear-algebra substrate: spectral norm, a discrete algebraic
//! Riccati solver, a dense convex QP solver and a small dense LP solver.
//!
//! Everything here is deterministic and operates on plain `f64` dense
//! matrices. The solvers are written for the small, well-conditioned
//! problems that arise when condensing finite-horizon optimal control
//! problems; they are not meant for large-scale or sparse work.

mod dare;
mod lp;
mod qp;

pub use dare::solve_dare;
pub use lp::solve_lp;
pub use qp::{solve_qp, PreparedQp, QpSolution};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense row-major matrix of `f64` entries.
pub type Matrix = DMatrix<f64>;
/// Dense column vector of `f64` entries.
pub type Vector = DVector<f64>;

/// Errors produced by the numerical kernels.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("power iteration did not converge after {iters} iterations (residual {residual:.3e})")]
    SpectralNormStalled { iters: usize, residual: f64 },
    #[error("Riccati fixed-point iteration did not converge (last step {residual:.3e})")]
    DareDiverged { residual: f64 },
    #[error("Riccati solution failed validation: {0}")]
    DareInvalid(String),
    #[error("quadratic term is not symmetric within 1e-12 (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("quadratic term is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraint set is infeasible (best residual {residual:.3e} after {iters} iterations)")]
    QpInfeasible { residual: f64, iters: usize },
    #[error(
        "QP did not converge within {iters} iterations (primal residual {primal:.3e}, duality gap {gap:.3e})"
    )]
    QpStalled { iters: usize, primal: f64, gap: f64 },
    #[error("LP is unbounded along the requested objective")]
    LpUnbounded,
    #[error("LP is infeasible (phase-1 residual {0:.3e})")]
    LpInfeasible(f64),
    #[error("simplex did not terminate within {0} pivots")]
    LpStalled(usize),
}

/// QP data in the standard form `min 0.5 uᵀHu + fᵀu  s.t.  Gu ≤ h`.
#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive definite quadratic term `H`.
    pub hessian: Matrix,
    /// Linear term `f`.
    pub gradient: Vector,
    /// Inequality matrix `G` (one row per constraint).
    pub ineq_matrix: Matrix,
    /// Inequality right-hand side `h`.
    pub ineq_bound: Vector,
}

impl QpProblem {
    /// Checks dimensions, finiteness and symmetry of the quadratic term.
    pub fn validate(&self) -> Result<(), NumericsError> {
        let n = self.hessian.nrows();
        if self.hessian.ncols() != n {
            return Err(NumericsError::Dimension("H must be square".into()));
        }
        if self.gradient.len() != n {
            return Err(NumericsError::Dimension(format!(
                "gradient has length {}, expected {n}",
                self.gradient.len()
            )));
        }
        if self.ineq_matrix.ncols() != n {
            return Err(NumericsError::Dimension(format!(
                "constraint matrix has {} columns, expected {n}",
                self.ineq_matrix.ncols()
            )));
        }
        if self.ineq_bound.len() != self.ineq_matrix.nrows() {
            return Err(NumericsError::Dimension(format!(
                "constraint bound has length {}, expected {}",
                self.ineq_bound.len(),
                self.ineq_matrix.nrows()
            )));
        }
        for m in [&self.hessian, &self.ineq_matrix] {
            if m.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite("QP matrix data"));
            }
        }
        if self.gradient.iter().any(|x| !x.is_finite())
            || self.ineq_bound.iter().any(|x| !x.is_finite())
        {
            return Err(NumericsError::NonFinite("QP vector data"));
        }
        let asym = relative_asymmetry(&self.hessian);
        if asym > 1e-12 {
            return Err(NumericsError::NotSymmetric(asym));
        }
        Ok(())
    }
}

/// `‖H − Hᵀ‖∞ / max(1, ‖H‖∞)` over entries.
pub(crate) fn relative_asymmetry(m: &Matrix) -> f64 {
    let scale = m.iter().fold(0.0_f64, |a, x| a.max(x.abs())).max(1.0);
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

/// Elementwise Euclidean projection onto the nonnegative orthant.
pub fn project_nonneg(v: &Vector) -> Vector {
    debug_assert!(v.iter().all(|x| x.is_finite()));
    v.map(|x| x.max(0.0))
}

/// Largest singular value via power iteration on `mᵀm`.
///
/// Uses a fixed pseudo-random start vector so results are reproducible.
/// Fails if the iteration has not met the residual criterion after the
/// iteration cap.
pub fn spectral_norm(m: &Matrix) -> Result<f64, NumericsError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite("spectral_norm input"));
    }
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return Ok(0.0);
    }
    let gram = m.transpose() * m;
    let scale = gram.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }

    // Deterministic start: simple LCG stream, normalized.
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut v = Vector::from_fn(n, |_, _| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    });
    v /= v.norm();

    let cap = 200_000;
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let w = &gram * &v;
        let lambda = v.dot(&w);
        residual = (&w - lambda * &v).norm();
        // |lambda - lambda_true| <= residual for symmetric matrices, so this
        // bounds the relative error of the singular value well below 1e-10.
        if residual <= 1e-13 * scale + 1e-12 * lambda.abs() {
            return Ok(lambda.max(0.0).sqrt());
        }
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w / wn;
    }
    Err(NumericsError::SpectralNormStalled { iters: cap, residual })
}
