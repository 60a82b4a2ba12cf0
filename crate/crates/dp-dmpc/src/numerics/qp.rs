//! Dense strictly convex QP solver.
//!
//! The problem `min 0.5 uᵀHu + fᵀu  s.t.  Gu ≤ h` is solved through its
//! dual: with `u(μ) = −H⁻¹(f + Gᵀμ)` the dual is a concave quadratic in
//! `μ ≥ 0`, maximized by accelerated projected gradient ascent with a
//! fixed step `1/‖G H⁻¹ Gᵀ‖`. Stationarity holds by construction, so the
//! exit test is primal feasibility plus the complementarity gap.

use super::{relative_asymmetry, spectral_norm, Matrix, NumericsError, QpProblem, Vector};
use nalgebra::Cholesky;

/// Default iteration cap for [`solve_qp`].
pub const QP_MAX_ITERS: usize = 50_000;
/// Default tolerance for [`solve_qp`].
pub const QP_TOL: f64 = 1e-8;

const CHECK_EVERY: usize = 5;
const STALL_RESIDUAL: f64 = 1e-6;
const STALL_ITERS: usize = 1_000;

/// Primal/dual solution pair returned by [`PreparedQp::solve`].
#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Primal minimizer.
    pub primal: Vector,
    /// Nonnegative multipliers for the inequality rows.
    pub multipliers: Vector,
    /// Worst primal constraint violation at the solution.
    pub primal_residual: f64,
    /// Complementarity gap `|μᵀ(Gu − h)|` at the solution.
    pub gap: f64,
    /// Objective value `0.5 uᵀHu + fᵀu`.
    pub objective: f64,
    /// Dual iterations used.
    pub iterations: usize,
}

/// Factorized QP structure that can be re-solved cheaply for many linear
/// terms (the constraint set and Hessian stay fixed).
#[derive(Debug, Clone)]
pub struct PreparedQp {
    chol: Cholesky<f64, nalgebra::Dyn>,
    ineq: Matrix,
    bound: Vector,
    /// `H⁻¹Gᵀ`, cached for primal recovery.
    hinv_gt: Matrix,
    /// `G H⁻¹ Gᵀ`.
    gram: Matrix,
    /// `1/‖G H⁻¹ Gᵀ‖`, the dual gradient step.
    step: f64,
}

impl PreparedQp {
    /// Symmetrizes and factorizes the Hessian and caches the dual operator.
    pub fn new(hessian: &Matrix, ineq: &Matrix, bound: &Vector) -> Result<Self, NumericsError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(NumericsError::Dimension("H must be square".into()));
        }
        if ineq.ncols() != n {
            return Err(NumericsError::Dimension(format!(
                "constraint matrix has {} columns, expected {n}",
                ineq.ncols()
            )));
        }
        if ineq.nrows() != bound.len() {
            return Err(NumericsError::Dimension(format!(
                "constraint bound has length {}, expected {}",
                bound.len(),
                ineq.nrows()
            )));
        }
        let asym = relative_asymmetry(hessian);
        if asym > 1e-12 {
            return Err(NumericsError::NotSymmetric(asym));
        }
        // Remove round-off asymmetry before factorizing.
        let sym = (hessian + hessian.transpose()) * 0.5;
        let chol = Cholesky::new(sym).ok_or(NumericsError::NotPositiveDefinite)?;
        let hinv_gt = chol.solve(&ineq.transpose());
        let gram = ineq * &hinv_gt;
        let lipschitz = spectral_norm(&gram)?;
        let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 0.0 };
        Ok(Self {
            chol,
            ineq: ineq.clone(),
            bound: bound.clone(),
            hinv_gt,
            gram,
            step,
        })
    }

    /// Number of inequality rows.
    pub fn rows(&self) -> usize {
        self.ineq.nrows()
    }

    /// Solves for the given linear term, optionally warm-starting the dual.
    pub fn solve(
        &self,
        gradient: &Vector,
        warm: Option<&Vector>,
        tol: f64,
        max_iters: usize,
    ) -> Result<QpSolution, NumericsError> {
        if gradient.len() != self.hinv_gt.nrows() {
            return Err(NumericsError::Dimension(format!(
                "gradient has length {}, expected {}",
                gradient.len(),
                self.hinv_gt.nrows()
            )));
        }
        if gradient.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("QP gradient"));
        }
        let unconstrained = -self.chol.solve(gradient);
        let rows = self.rows();
        if rows == 0 {
            let objective = objective_value(&self.chol, gradient, &unconstrained);
            return Ok(QpSolution {
                primal: unconstrained,
                multipliers: Vector::zeros(0),
                primal_residual: 0.0,
                gap: 0.0,
                objective,
                iterations: 0,
            });
        }
        // Gu(μ) − h = base − W μ.
        let base = &self.ineq * &unconstrained - &self.bound;

        let mut mu = match warm {
            Some(w) if w.len() == rows => w.map(|x| x.max(0.0)),
            _ => Vector::zeros(rows),
        };
        let mut mu_prev = mu.clone();
        let mut momentum = 1.0_f64;

        let mut best_residual = f64::INFINITY;
        let mut stall = 0usize;

        let mut iters = 0usize;
        let mut primal_residual;
        let mut gap;
        loop {
            // Accelerated step on y = μ + ((t_prev − 1)/t)(μ − μ_prev).
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / t_next;
            let y = &mu + (&mu - &mu_prev) * beta;
            let grad_y = &base - &self.gram * &y;
            let candidate = (&y + &grad_y * self.step).map(|x| x.max(0.0));
            // Gradient restart keeps the momentum from overshooting.
            let restart = grad_y.dot(&(&candidate - &mu)) < 0.0;
            mu_prev = mu;
            mu = candidate;
            momentum = if restart { 1.0 } else { t_next };
            iters += 1;

            if iters % CHECK_EVERY == 0 || iters >= max_iters {
                let slack = &base - &self.gram * &mu;
                primal_residual = slack.iter().fold(0.0_f64, |a, &s| a.max(s));
                gap = mu.dot(&slack).abs();
                let primal = &unconstrained - &self.hinv_gt * &mu;
                let objective = objective_value(&self.chol, gradient, &primal);
                let scale = 1.0 + objective.abs();
                if primal_residual <= tol && gap <= tol * scale {
                    return Ok(QpSolution {
                        primal,
                        multipliers: mu,
                        primal_residual: primal_residual.max(0.0),
                        gap,
                        objective,
                        iterations: iters,
                    });
                }
                // Infeasible sets drive μ to infinity while the primal
                // residual stalls; declare infeasibility when it stops
                // improving above the threshold.
                if primal_residual < best_residual - 1e-12 * best_residual.max(1.0) {
                    best_residual = primal_residual;
                    stall = 0;
                } else {
                    stall += CHECK_EVERY;
                }
                if best_residual > STALL_RESIDUAL && stall >= STALL_ITERS {
                    return Err(NumericsError::QpInfeasible {
                        residual: best_residual,
                        iters,
                    });
                }
                if iters >= max_iters {
                    return Err(NumericsError::QpStalled {
                        iters,
                        primal: primal_residual,
                        gap,
                    });
                }
            }
        }
    }
}

fn objective_value(chol: &Cholesky<f64, nalgebra::Dyn>, gradient: &Vector, u: &Vector) -> f64 {
    // 0.5 uᵀHu + fᵀu with H recovered through the factor.
    let l = chol.l();
    let ltu = l.transpose() * u;
    0.5 * ltu.norm_squared() + gradient.dot(u)
}

/// Solves `min 0.5 uᵀHu + fᵀu  s.t.  Gu ≤ h` to the given tolerance.
///
/// Deterministic for fixed inputs. Distinguishes infeasible constraint
/// sets from slow convergence in its error values.
pub fn solve_qp(problem: &QpProblem, tol: f64) -> Result<Vector, NumericsError> {
    problem.validate()?;
    let prepared = PreparedQp::new(&problem.hessian, &problem.ineq_matrix, &problem.ineq_bound)?;
    let solution = prepared.solve(&problem.gradient, None, tol, QP_MAX_ITERS)?;
    Ok(solution.primal)
}
