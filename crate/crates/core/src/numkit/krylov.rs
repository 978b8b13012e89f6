//! Krylov solvers for symmetric systems `(A + damping·I) x = b`.
//!
//! Conjugate Residual only needs `A` to be symmetric; Conjugate Gradient
//! additionally needs positive curvature along every search direction and
//! stops with [`Error::IndefiniteDetected`] as soon as that fails.

use super::{axpy, dot, norm2, LinearOperator, Vector};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOL: f64 = 1e-8;

/// `10·dim`, capped at 1000.
pub fn default_max_iter(dim: usize) -> usize {
    (10 * dim).clamp(1, 1000)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: Vector,
    /// True residual `‖(A + damping·I)x − b‖₂` of the returned solution.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Recursively updated residual norms, starting with `‖b‖`.
    pub residual_history: Vec<f64>,
}

struct Damped<'a, A> {
    op: &'a A,
    damping: f64,
}

impl<A: LinearOperator> Damped<'_, A> {
    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.op.apply_into(x, out);
        if self.damping != 0.0 {
            axpy(self.damping, x, out);
        }
    }
}

fn check_inputs<A: LinearOperator>(a: &A, b: &[f64], damping: f64) -> Result<()> {
    if b.len() != a.dim() {
        return Err(Error::BadInput(format!("rhs has dim {} but operator has dim {}", b.len(), a.dim())));
    }
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::BadInput(format!("damping must be finite and nonnegative, got {damping}")));
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { context: "right-hand side".into() });
    }
    Ok(())
}

fn finish<A: LinearOperator>(
    op: &Damped<'_, A>,
    b: &[f64],
    x: Vector,
    iterations: usize,
    tol: f64,
    residual_history: Vec<f64>,
) -> SolveReport {
    let mut ax = vec![0.0; b.len()];
    op.apply_into(&x, &mut ax);
    let mut r2 = 0.0;
    for (axi, bi) in ax.iter().zip(b) {
        let d = axi - bi;
        r2 += d * d;
    }
    let residual_norm = r2.sqrt();
    SolveReport {
        converged: residual_norm <= tol * norm2(b),
        solution: x,
        residual_norm,
        iterations,
        residual_history,
    }
}

fn non_finite(iteration: usize) -> Error {
    Error::NonFinite { context: format!("Krylov iterate became non-finite at iteration {iteration}") }
}

/// Conjugate Residual for symmetric, possibly indefinite, operators.
///
/// Returns a report with `converged = false` when `max_iter` is exhausted or
/// the recurrence stalls (`rᵀAr = 0`).
pub fn conjugate_residual<A: LinearOperator>(
    a: &A,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    damping: f64,
) -> Result<SolveReport> {
    check_inputs(a, b, damping)?;
    let n = b.len();
    let op = Damped { op: a, damping };
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    let mut history = vec![b_norm];
    if b_norm == 0.0 {
        return Ok(finish(&op, b, x, 0, tol, history));
    }

    let mut r = b.to_vec();
    let mut ar = vec![0.0; n];
    op.apply_into(&r, &mut ar);
    let mut p = r.clone();
    let mut ap = ar.clone();
    let mut rho = dot(&r, &ar);
    let threshold = tol * b_norm;

    let mut iterations = 0;
    while iterations < max_iter {
        let ap2 = dot(&ap, &ap);
        if rho == 0.0 || ap2 == 0.0 {
            break;
        }
        let alpha = rho / ap2;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iterations += 1;
        let r_norm = norm2(&r);
        if !alpha.is_finite() || !r_norm.is_finite() {
            return Err(non_finite(iterations));
        }
        history.push(r_norm);
        if r_norm <= threshold {
            break;
        }
        op.apply_into(&r, &mut ar);
        let rho_next = dot(&r, &ar);
        let beta = rho_next / rho;
        rho = rho_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
            ap[i] = ar[i] + beta * ap[i];
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(non_finite(iterations));
    }
    Ok(finish(&op, b, x, iterations, tol, history))
}

/// Conjugate Gradient; intended for positive-definite operators.
///
/// Fails with [`Error::IndefiniteDetected`] when a search direction has
/// `pᵀAp ≤ 0`.
pub fn conjugate_gradient<A: LinearOperator>(
    a: &A,
    b: &[f64],
    tol: f64,
    max_iter: usize,
    damping: f64,
) -> Result<SolveReport> {
    check_inputs(a, b, damping)?;
    let n = b.len();
    let op = Damped { op: a, damping };
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    let mut history = vec![b_norm];
    if b_norm == 0.0 {
        return Ok(finish(&op, b, x, 0, tol, history));
    }

    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let threshold = tol * b_norm;

    let mut iterations = 0;
    while iterations < max_iter {
        op.apply_into(&p, &mut ap);
        let curvature = dot(&p, &ap);
        if curvature <= 0.0 {
            return Err(Error::IndefiniteDetected { iteration: iterations, curvature });
        }
        let alpha = rr / curvature;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iterations += 1;
        let rr_next = dot(&r, &r);
        if !alpha.is_finite() || !rr_next.is_finite() {
            return Err(non_finite(iterations));
        }
        history.push(rr_next.sqrt());
        if rr_next.sqrt() <= threshold {
            break;
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Ok(finish(&op, b, x, iterations, tol, history))
}
