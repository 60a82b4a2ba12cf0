//! Small dense LP solver (two-phase simplex with Bland's rule).
//!
//! Solves `max cᵀx  s.t.  Gx ≤ h` with free `x`, which is all the
//! polytope probing (boundedness certificates, coordinate ranges) in this
//! crate needs. Problems here have tens of rows at most, so a plain full
//! tableau is adequate.

use super::{Matrix, NumericsError, Vector};

const PIVOT_TOL: f64 = 1e-9;
const COST_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-7;
const MAX_PIVOTS: usize = 100_000;

/// Maximizes `cᵀx` over `{x : Gx ≤ h}` and returns `(x*, cᵀx*)`.
pub fn solve_lp(objective: &Vector, ineq: &Matrix, bound: &Vector) -> Result<(Vector, f64), NumericsError> {
    let n = objective.len();
    let rows = ineq.nrows();
    if ineq.ncols() != n {
        return Err(NumericsError::Dimension(format!(
            "LP constraint matrix has {} columns, expected {n}",
            ineq.ncols()
        )));
    }
    if bound.len() != rows {
        return Err(NumericsError::Dimension(format!(
            "LP bound has length {}, expected {rows}",
            bound.len()
        )));
    }
    if objective.iter().any(|x| !x.is_finite())
        || ineq.iter().any(|x| !x.is_finite())
        || bound.iter().any(|x| !x.is_finite())
    {
        return Err(NumericsError::NonFinite("solve_lp input"));
    }
    if rows == 0 {
        if objective.iter().all(|&c| c == 0.0) {
            return Ok((Vector::zeros(n), 0.0));
        }
        return Err(NumericsError::LpUnbounded);
    }

    // Columns: x⁺ (n) | x⁻ (n) | slack (rows) | artificial (as needed).
    let mut artificial_of_row = vec![usize::MAX; rows];
    let mut num_art = 0usize;
    for (i, &hi) in bound.iter().enumerate() {
        if hi < 0.0 {
            artificial_of_row[i] = num_art;
            num_art += 1;
        }
    }
    let cols = 2 * n + rows + num_art;
    let mut tab = vec![vec![0.0_f64; cols + 1]; rows];
    let mut basis = vec![0usize; rows];
    for i in 0..rows {
        let flip = if bound[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            tab[i][j] = flip * ineq[(i, j)];
            tab[i][n + j] = -flip * ineq[(i, j)];
        }
        tab[i][2 * n + i] = flip;
        tab[i][cols] = flip * bound[i];
        if artificial_of_row[i] != usize::MAX {
            let aj = 2 * n + rows + artificial_of_row[i];
            tab[i][aj] = 1.0;
            basis[i] = aj;
        } else {
            basis[i] = 2 * n + i;
        }
    }

    let mut pivots = 0usize;
    if num_art > 0 {
        // Phase 1: minimize the artificial sum.
        let mut cost = vec![0.0_f64; cols];
        for a in 0..num_art {
            cost[2 * n + rows + a] = -1.0; // maximize −Σa
        }
        let value = run_simplex(&mut tab, &mut basis, &cost, cols, &mut pivots)?;
        if value < -FEAS_TOL {
            return Err(NumericsError::LpInfeasible(-value));
        }
        // Pivot any artificial still basic (at zero) out of the basis.
        for i in 0..rows {
            if basis[i] >= 2 * n + rows {
                let col = (0..2 * n + rows).find(|&j| tab[i][j].abs() > PIVOT_TOL);
                if let Some(j) = col {
                    pivot(&mut tab, &mut basis, i, j);
                    pivots += 1;
                }
                // A fully zero row is redundant; leaving the artificial
                // basic at zero is harmless once its column is frozen.
            }
        }
    }

    // Phase 2: freeze artificial columns and maximize the real objective.
    let usable = 2 * n + rows;
    let mut cost = vec![0.0_f64; cols];
    for j in 0..n {
        cost[j] = objective[j];
        cost[n + j] = -objective[j];
    }
    let _ = run_simplex_masked(&mut tab, &mut basis, &cost, usable, cols, &mut pivots)?;

    let mut x = Vector::zeros(n);
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            x[b] += tab[i][cols];
        } else if b < 2 * n {
            x[b - n] -= tab[i][cols];
        }
    }
    let value = objective.dot(&x);
    Ok((x, value))
}

fn run_simplex(
    tab: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    cols: usize,
    pivots: &mut usize,
) -> Result<f64, NumericsError> {
    run_simplex_masked(tab, basis, cost, cols, cols, pivots)
}

/// Simplex iterations restricted to the first `usable` columns
/// (`cols` is the full width, used only to locate the RHS).
fn run_simplex_masked(
    tab: &mut [Vec<f64>],
    basis: &mut [usize],
    cost: &[f64],
    usable: usize,
    cols: usize,
    pivots: &mut usize,
) -> Result<f64, NumericsError> {
    let rows = tab.len();
    loop {
        if *pivots > MAX_PIVOTS {
            return Err(NumericsError::LpStalled(MAX_PIVOTS));
        }
        // Reduced costs r_j = c_j − c_Bᵀ B⁻¹ A_j; Bland: first positive.
        let mut entering = None;
        for j in 0..usable {
            if basis.contains(&j) {
                continue;
            }
            let mut reduced = cost[j];
            for i in 0..rows {
                reduced -= cost[basis[i]] * tab[i][j];
            }
            if reduced > COST_TOL {
                entering = Some(j);
                break;
            }
        }
        let Some(j) = entering else {
            let mut value = 0.0;
            for i in 0..rows {
                value += cost[basis[i]] * tab[i][cols];
            }
            return Ok(value);
        };
        // Ratio test; Bland ties on the smallest basic index.
        let mut leaving: Option<(usize, f64)> = None;
        for i in 0..rows {
            if tab[i][j] > PIVOT_TOL {
                let ratio = tab[i][cols] / tab[i][j];
                match leaving {
                    None => leaving = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - PIVOT_TOL
                            || (ratio < lr + PIVOT_TOL && basis[i] < basis[li])
                        {
                            leaving = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((i, _)) = leaving else {
            return Err(NumericsError::LpUnbounded);
        };
        pivot(tab, basis, i, j);
        *pivots += 1;
    }
}

fn pivot(tab: &mut [Vec<f64>], basis: &mut [usize], row: usize, col: usize) {
    let cols = tab[row].len();
    let p = tab[row][col];
    for v in tab[row].iter_mut() {
        *v /= p;
    }
    for i in 0..tab.len() {
        if i == row {
            continue;
        }
        let factor = tab[i][col];
        if factor != 0.0 {
            for j in 0..cols {
                let delta = factor * tab[row][j];
                tab[i][j] -= delta;
            }
        }
    }
    basis[row] = col;
}
