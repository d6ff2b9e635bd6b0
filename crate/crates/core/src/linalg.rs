//! Dense SPD solves and Gaussian draws from a precision parameterization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Draw from `N(Q^{-1} b, Q^{-1})` given precision `Q` and linear term `b`.
///
/// With `Q = L L'`: the mean solves `L L' m = b`, and `m + L'^{-1} z` has
/// covariance `Q^{-1}`.
pub fn draw_gaussian_canonical(
    precision: DMatrix<f64>,
    linear: &DVector<f64>,
    rng: &mut RngStream,
    what: &'static str,
) -> Result<DVector<f64>> {
    let chol = Cholesky::new(precision).ok_or(Error::NotPositiveDefinite(what))?;
    let mean = chol.solve(linear);
    let n = linear.len();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    let l = chol.l();
    let noise = l
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(Error::NotPositiveDefinite(what))?;
    Ok(mean + noise)
}

/// Cholesky factor with a context label on failure.
pub fn cholesky(m: DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::NotPositiveDefinite(what))
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    Ok(cholesky(a, what)?.solve(b))
}

/// `x' A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}
