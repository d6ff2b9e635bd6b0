//! B-spline bases over a scalar covariate and the second-difference penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub degree: usize,
    pub interior_knots: Vec<f64>,
    pub boundary: (f64, f64),
}

impl SplineBasis {
    /// Basis dimension `degree + 1 + interior knots`.
    pub fn dim(&self) -> usize {
        self.degree + 1 + self.interior_knots.len()
    }

    fn knot_vector(&self) -> Vec<f64> {
        let d = self.degree;
        let mut t = Vec::with_capacity(2 * (d + 1) + self.interior_knots.len());
        t.extend(std::iter::repeat_n(self.boundary.0, d + 1));
        t.extend_from_slice(&self.interior_knots);
        t.extend(std::iter::repeat_n(self.boundary.1, d + 1));
        t
    }

    /// All basis functions at `x`, clamped to the boundary interval.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        let mut row = vec![0.0; self.dim()];
        self.evaluate_into(&self.knot_vector(), x, &mut row);
        row
    }

    fn evaluate_into(&self, t: &[f64], x: f64, row: &mut [f64]) {
        let d = self.degree;
        let k = self.dim();
        let x = x.clamp(self.boundary.0, self.boundary.1);
        // Knot span: t[span] <= x < t[span + 1], the last span closed on the right.
        let span = if x >= self.boundary.1 {
            k - 1
        } else {
            let mut lo = d;
            let mut hi = k;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if x < t[mid] {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            lo
        };
        // Cox-de Boor, triangular form.
        let mut n = vec![0.0; d + 1];
        let mut left = vec![0.0; d + 1];
        let mut right = vec![0.0; d + 1];
        n[0] = 1.0;
        for j in 1..=d {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom > 0.0 { n[r] / denom } else { 0.0 };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        for (i, v) in n.iter().enumerate() {
            row[span - d + i] = *v;
        }
    }

    /// Basis matrix with one row per point.
    pub fn matrix(&self, v: &[f64]) -> DMatrix<f64> {
        let t = self.knot_vector();
        let k = self.dim();
        let mut m = DMatrix::zeros(v.len(), k);
        let mut row = vec![0.0; k];
        for (h, &x) in v.iter().enumerate() {
            row.iter_mut().for_each(|r| *r = 0.0);
            self.evaluate_into(&t, x, &mut row);
            for (j, r) in row.iter().enumerate() {
                m[(h, j)] = *r;
            }
        }
        m
    }
}

/// Basis of the given degree with `n_knots` interior knots at equally spaced
/// quantiles of `v`, evaluated at every element of `v`.
///
/// Tied quantiles are separated by `1e-9 * range`.
pub fn build_basis(
    v: &[f64],
    degree: usize,
    n_knots: usize,
) -> Result<(SplineBasis, DMatrix<f64>)> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid(
            "spline covariate has non-finite values".into(),
        ));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < n_knots + 2 {
        return Err(Error::Invalid(format!(
            "spline needs at least {} distinct covariate values, found {}",
            n_knots + 2,
            distinct.len()
        )));
    }
    let k = degree + 1 + n_knots;
    if v.len() < k {
        return Err(Error::Invalid(format!(
            "spline basis of dimension {k} needs at least {k} points, found {}",
            v.len()
        )));
    }
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let eps = 1e-9 * (hi - lo);
    let mut knots = Vec::with_capacity(n_knots);
    let mut prev = lo;
    for j in 1..=n_knots {
        let mut q = quantile_sorted(&sorted, j as f64 / (n_knots + 1) as f64);
        if q <= prev {
            q = prev + eps;
        }
        knots.push(q);
        prev = q;
    }
    if prev >= hi {
        return Err(Error::Invalid(
            "too few distinct values to place interior knots".into(),
        ));
    }
    let basis = SplineBasis {
        degree,
        interior_knots: knots,
        boundary: (lo, hi),
    };
    let m = basis.matrix(v);
    Ok((basis, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub dim: usize,
    /// `D'D + ridge * I`.
    pub matrix: DMatrix<f64>,
    pub ridge: f64,
}

/// `D'D` for the `(k - 2) x k` second-difference operator `D`.
pub fn second_difference_gram(k: usize) -> Result<DMatrix<f64>> {
    if k < 3 {
        return Err(Error::Invalid(format!(
            "penalty needs dimension >= 3, got {k}"
        )));
    }
    let mut d = DMatrix::zeros(k - 2, k);
    for i in 0..k - 2 {
        d[(i, i)] = 1.0;
        d[(i, i + 1)] = -2.0;
        d[(i, i + 2)] = 1.0;
    }
    Ok(d.transpose() * d)
}

pub fn build_penalty(k: usize, ridge: f64) -> Result<PenaltyMatrix> {
    if !(ridge >= 0.0) {
        return Err(Error::Invalid(format!(
            "ridge must be nonnegative, got {ridge}"
        )));
    }
    let mut matrix = second_difference_gram(k)?;
    for i in 0..k {
        matrix[(i, i)] += ridge;
    }
    Ok(PenaltyMatrix {
        dim: k,
        matrix,
        ridge,
    })
}

/// `1e-6 * trace(D'D) / k`.
pub fn default_ridge(k: usize) -> Result<f64> {
    Ok(1e-6 * second_difference_gram(k)?.trace() / k as f64)
}
