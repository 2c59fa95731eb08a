//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a symmetric block is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Spectral condition number of a symmetric matrix (`inf` when singular).
pub fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = a.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for l in eig.eigenvalues.iter() {
        lo = lo.min(l.abs());
        hi = hi.max(l.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone().symmetric_eigen().eigenvalues.min()
}

/// Solves `a x = b` for symmetric `a`, refusing ill-conditioned systems.
pub fn solve_symmetric(a: &DMatrix<f64>, b: &DMatrix<f64>, site: usize) -> Result<DMatrix<f64>> {
    let cond = symmetric_condition(a);
    if cond > MAX_CONDITION {
        return Err(Error::singular(
            site,
            format!("condition estimate {cond:.3e} exceeds {MAX_CONDITION:.0e}"),
        ));
    }
    let sol = match a.clone().cholesky() {
        Some(ch) => ch.solve(b),
        None => a
            .clone()
            .lu()
            .solve(b)
            .ok_or_else(|| Error::singular(site, "LU factorization failed"))?,
    };
    if sol.iter().all(|v| v.is_finite()) {
        Ok(sol)
    } else {
        Err(Error::singular(site, "non-finite solution"))
    }
}

pub fn solve_symmetric_vec(a: &DMatrix<f64>, b: &DVector<f64>, site: usize) -> Result<DVector<f64>> {
    let m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_symmetric(a, &m, site)?;
    Ok(x.column(0).into_owned())
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>, site: usize) -> Result<DMatrix<f64>> {
    let inv = solve_symmetric(a, &DMatrix::identity(a.nrows(), a.ncols()), site)?;
    Ok(symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Solves a general square system with a finite-difference-friendly LU.
pub fn solve_general(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

pub fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
