//! Matrix square-root actions by Lanczos iteration.
//!
//! Runs the symmetric Lanczos process from `v / |v|` with full
//! reorthogonalization, then applies `T_k^{1/2}` through the eigendecomposition
//! of the small tridiagonal matrix: `A^{1/2} v ~ |v| Q_k T_k^{1/2} e_1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Upper bound on the number of iterations used by default.
pub const DEFAULT_MAX_ITERS: usize = 64;
/// Convergence threshold on the relative weight of the newest Lanczos vector.
pub const DEFAULT_TOLERANCE: f64 = 1e-7;

/// Default iteration count for a problem of dimension `n`.
pub fn default_iterations(n: usize) -> usize {
    DEFAULT_MAX_ITERS.min(n).max(1)
}

/// Approximates `A^{1/2} v` with `k` Lanczos iterations.
///
/// Stops early on breakdown (the Krylov space became invariant, so the
/// current result is exact).
pub fn lanczos_sqrt_mv<F>(matvec: F, v: &DVector<f64>, k: usize) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    run(matvec, v, k, None).map(|(x, _)| x)
}

/// As [`lanczos_sqrt_mv`] but stops once the newest basis vector carries a
/// relative weight below `tol`. Returns the result and the iterations used.
pub fn lanczos_sqrt_mv_tol<F>(matvec: F, v: &DVector<f64>, max_k: usize, tol: f64) -> Result<(DVector<f64>, usize)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    run(matvec, v, max_k, Some(tol))
}

fn run<F>(matvec: F, v: &DVector<f64>, k: usize, tol: Option<f64>) -> Result<(DVector<f64>, usize)>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if k == 0 {
        return Err(Error::Domain("Lanczos needs at least one iteration".into()));
    }
    let n = v.len();
    let norm = v.norm();
    if !norm.is_finite() {
        return Err(Error::Numerical("non-finite start vector".into()));
    }
    if norm == 0.0 {
        return Ok((DVector::zeros(n), 0));
    }
    let k = k.min(n);
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut alphas: Vec<f64> = Vec::with_capacity(k);
    let mut betas: Vec<f64> = Vec::with_capacity(k);
    basis.push(v / norm);
    let coeffs = loop {
        let j = basis.len() - 1;
        let mut w = matvec(&basis[j]);
        if w.len() != n {
            return Err(Error::dimension("matvec output", n, w.len()));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite matvec result at iteration {}", j + 1)));
        }
        let a = basis[j].dot(&w);
        alphas.push(a);
        // two passes of classical Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let b = w.norm();
        let coeffs = sqrt_tridiag_e1(&alphas, &betas);
        let scale = alphas.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(betas.iter().cloned().fold(0.0, f64::max));
        let breakdown = b <= 1e-13 * scale.max(f64::MIN_POSITIVE);
        let converged = tol.is_some_and(|t| {
            let last = coeffs[coeffs.len() - 1].abs();
            last <= t * coeffs.norm()
        });
        if basis.len() == k || breakdown || converged {
            break coeffs;
        }
        betas.push(b);
        basis.push(w / b);
    };

    let used = alphas.len();
    let mut out = DVector::zeros(n);
    for (q, c) in basis.iter().take(used).zip(coeffs.iter()) {
        out.axpy(norm * c, q, 1.0);
    }
    Ok((out, used))
}

/// `T^{1/2} e_1` for the symmetric tridiagonal `T` with the given diagonal and
/// off-diagonal. Negative eigenvalues are clamped to zero.
fn sqrt_tridiag_e1(diag: &[f64], off: &[f64]) -> DVector<f64> {
    let k = diag.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = diag[i];
        if i + 1 < k {
            t[(i, i + 1)] = off[i];
            t[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut out = DVector::zeros(k);
    for (idx, lambda) in eig.eigenvalues.iter().enumerate() {
        let col = eig.eigenvectors.column(idx);
        let w = lambda.max(0.0).sqrt() * col[0];
        out.axpy(w, &col, 1.0);
    }
    out
}
