//! Small dense helpers for the d x d systems that show up in Newton steps and
//! sandwich estimators. `d` is at most a few hundred, so everything is direct.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Systems with a reciprocal condition number below this are treated as singular.
pub const RCOND_LIMIT: f64 = 1e-12;

/// `lambda_min / lambda_max` of a symmetric matrix (0 when not positive definite).
pub fn reciprocal_condition(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.max();
    let min = eig.min();
    if !(max > 0.0) || !min.is_finite() || min <= 0.0 {
        return 0.0;
    }
    min / max
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let rcond = reciprocal_condition(a);
    if rcond < RCOND_LIMIT {
        return Err(Error::SingularHessian { rcond });
    }
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(b));
    }
    a.clone()
        .full_piv_lu()
        .solve(b)
        .ok_or(Error::SingularHessian { rcond })
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rcond = reciprocal_condition(a);
    if rcond < RCOND_LIMIT {
        return Err(Error::SingularHessian { rcond });
    }
    let inv = match a.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => a
            .clone()
            .full_piv_lu()
            .try_inverse()
            .ok_or(Error::SingularHessian { rcond })?,
    };
    Ok(symmetrize(inv))
}

/// `bread^-1 meat bread^-1`.
pub fn sandwich(bread: &DMatrix<f64>, meat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let inv = spd_inverse(bread)?;
    Ok(symmetrize(&inv * meat * &inv))
}

pub fn symmetrize(mut a: DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Adds `w * x x'` to the lower triangle of `acc`.
#[inline]
pub(crate) fn add_outer_lower(acc: &mut DMatrix<f64>, x: &[f64], w: f64) {
    let d = x.len();
    for j in 0..d {
        let wxj = w * x[j];
        if wxj == 0.0 {
            continue;
        }
        let mut col = acc.column_mut(j);
        for i in j..d {
            col[i] += wxj * x[i];
        }
    }
}

/// Copies the lower triangle onto the upper one.
pub(crate) fn fill_upper(acc: &mut DMatrix<f64>) {
    let d = acc.nrows();
    for j in 0..d {
        for i in (j + 1)..d {
            acc[(j, i)] = acc[(i, j)];
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
