//! Symmetric eigensolvers: dense (all pairs) and Lanczos (top-k by |λ|).

use super::{axpy, dot, norm2, scale, LinearOperator, Matrix, Vector};
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Dense eigendecomposition is refused above this dimension.
pub const DENSE_EIG_MAX_DIM: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigPair {
    pub value: f64,
    /// Unit-norm eigenvector.
    pub vector: Vector,
    /// `‖A·v − λ·v‖₂` (Ritz residual for Lanczos pairs, 0 for dense pairs).
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopEigs {
    pub pairs: Vec<EigPair>,
    /// The Krylov space became invariant before `k` pairs were available.
    pub breakdown: bool,
    pub iterations: usize,
}

/// Sort order for eigenpairs: descending |λ|, then descending λ, then
/// ascending discovery index.
fn by_magnitude(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.abs()
        .partial_cmp(&a.1.abs())
        .unwrap_or(Ordering::Equal)
        .then(b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal))
        .then(a.0.cmp(&b.0))
}

/// Flips the sign so the largest-magnitude entry (first on ties) is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        scale(-1.0, v);
    }
}

/// All eigenpairs of a dense symmetric matrix, sorted by descending |λ|.
pub fn dense_sym_eig(a: &Matrix) -> Result<Vec<EigPair>> {
    if !a.is_square() {
        return Err(Error::BadInput(format!("matrix is {}x{}, not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n > DENSE_EIG_MAX_DIM {
        return Err(Error::DimTooLarge { dim: n, max: DENSE_EIG_MAX_DIM });
    }
    crate::error::ensure_finite(a.as_slice(), || "dense eigensolve input".into())?;
    let m = nalgebra::DMatrix::from_row_slice(n, n, a.as_slice());
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<(usize, f64)> = eig.eigenvalues.iter().copied().enumerate().collect();
    order.sort_by(|&x, &y| by_magnitude(x, y));
    Ok(order
        .into_iter()
        .map(|(i, value)| {
            let mut vector: Vector = eig.eigenvectors.column(i).iter().copied().collect();
            let nrm = norm2(&vector);
            scale(1.0 / nrm, &mut vector);
            canonical_sign(&mut vector);
            EigPair { value, vector, residual: 0.0 }
        })
        .collect())
}

/// Top-`k` eigenpairs by |λ| of a symmetric operator via Lanczos with full
/// reorthogonalization, started from a seeded Gaussian vector.
pub fn topk_eigs<A: LinearOperator>(a: &A, k: usize, num_iters: usize, seed: u64) -> Result<TopEigs> {
    let n = a.dim();
    if k == 0 || k > num_iters || num_iters > n {
        return Err(Error::BadInput(format!("need 0 < k ≤ num_iters ≤ dim, got k={k}, num_iters={num_iters}, dim={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vector = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v_norm = norm2(&v);
    scale(1.0 / v_norm, &mut v);

    let mut basis: Vec<Vector> = Vec::with_capacity(num_iters);
    let mut alpha = Vec::with_capacity(num_iters);
    let mut beta: Vec<f64> = Vec::with_capacity(num_iters);
    let mut w = vec![0.0; n];
    let mut op_scale = 0.0f64;
    let mut invariant = false;

    basis.push(v);
    loop {
        let j = basis.len() - 1;
        a.apply_into(&basis[j], &mut w);
        crate::error::ensure_finite(&w, || format!("Lanczos operator output at step {j}"))?;
        op_scale = op_scale.max(norm2(&w));
        let a_j = dot(&w, &basis[j]);
        alpha.push(a_j);
        axpy(-a_j, &basis[j], &mut w);
        if j > 0 {
            axpy(-beta[j - 1], &basis[j - 1], &mut w);
        }
        // Two passes of classical Gram-Schmidt against the whole basis.
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                axpy(-c, q, &mut w);
            }
        }
        let b_j = norm2(&w);
        if basis.len() == num_iters {
            beta.push(b_j);
            break;
        }
        if b_j <= 1e-10 * op_scale.max(f64::MIN_POSITIVE) {
            invariant = true;
            beta.push(0.0);
            break;
        }
        beta.push(b_j);
        let mut next = w.clone();
        scale(1.0 / b_j, &mut next);
        basis.push(next);
    }

    let m = basis.len();
    let mut diag = alpha.clone();
    let mut off: Vec<f64> = beta[..m - 1].to_vec();
    off.push(0.0);
    let mut z = Matrix::identity(m);
    tridiagonal_ql(&mut diag, &mut off, &mut z)?;

    let residual_tail = beta[m - 1];
    let mut order: Vec<(usize, f64)> = diag.iter().copied().enumerate().collect();
    order.sort_by(|&x, &y| by_magnitude(x, y));
    let pairs: Vec<EigPair> = order
        .into_iter()
        .take(k)
        .map(|(i, value)| {
            let mut vector = vec![0.0; n];
            for (row, q) in basis.iter().enumerate() {
                axpy(z[(row, i)], q, &mut vector);
            }
            let nrm = norm2(&vector);
            scale(1.0 / nrm, &mut vector);
            canonical_sign(&mut vector);
            EigPair { value, vector, residual: (residual_tail * z[(m - 1, i)]).abs() }
        })
        .collect();
    Ok(TopEigs { breakdown: invariant && pairs.len() < k, pairs, iterations: m })
}

/// Implicit QL on a symmetric tridiagonal matrix.
///
/// `d` holds the diagonal, `e[i]` couples rows `i` and `i + 1` (the last
/// entry is ignored). On return `d` holds eigenvalues and column `i` of `z`
/// (initialised to the identity, or to a basis to be rotated) the matching
/// eigenvector.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut Matrix) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 100 {
                return Err(Error::NonFinite { context: "tridiagonal QL failed to converge".into() });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..z.rows() {
                    let f = z[(k, i + 1)];
                    z[(k, i + 1)] = s * z[(k, i)] + c * f;
                    z[(k, i)] = c * z[(k, i)] - s * f;
                }
            }
            if deflated {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}
