//! Penalized B-spline smoother for scatterplot overlays, with the penalty
//! chosen by generalized cross-validation on binned means.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spline::{second_difference_gram, SplineBasis};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothOptions {
    /// Equal-count bins of `x`.
    pub bins: usize,
    /// Equally spaced interior knots.
    pub knots: usize,
    /// Points on the output curve.
    pub grid: usize,
}

impl Default for SmoothOptions {
    fn default() -> Self {
        Self {
            bins: 40,
            knots: 10,
            grid: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothCurve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
    /// Trace of the hat matrix.
    pub edf: f64,
    /// Binned means the curve was fit to: `(x, y, count)`.
    pub bins: Vec<(f64, f64, usize)>,
    basis: SplineBasis,
    coef: Vec<f64>,
}

impl SmoothCurve {
    pub fn predict(&self, x: f64) -> f64 {
        self.basis
            .evaluate(x)
            .iter()
            .zip(&self.coef)
            .map(|(b, c)| b * c)
            .sum()
    }
}

/// Bin means over equal-count groups of the points sorted by `x`.
pub fn bin_means(x: &[f64], y: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let n = order.len();
    let b = bins.clamp(1, n.max(1));
    (0..b)
        .filter_map(|i| {
            let chunk = &order[i * n / b..(i + 1) * n / b];
            if chunk.is_empty() {
                return None;
            }
            let m = chunk.len() as f64;
            Some((
                chunk.iter().map(|&j| x[j]).sum::<f64>() / m,
                chunk.iter().map(|&j| y[j]).sum::<f64>() / m,
                chunk.len(),
            ))
        })
        .collect()
}

/// Weighted P-spline fit `(B'WB + lambda D'D) c = B'Wy` to the binned means,
/// with `lambda` minimizing GCV over a log grid.
pub fn smooth(x: &[f64], y: &[f64], opts: &SmoothOptions) -> Result<SmoothCurve> {
    if x.len() != y.len() || x.len() < 4 {
        return Err(Error::Invalid(
            "smoother needs at least four paired points".into(),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid(
            "smoother input has non-finite values".into(),
        ));
    }
    let bins = bin_means(x, y, opts.bins);
    let (lo, hi) = (bins[0].0, bins[bins.len() - 1].0);
    if !(hi > lo) || bins.len() < 4 {
        return Err(Error::Invalid("smoother needs spread in x".into()));
    }
    let knots = opts.knots.min(bins.len().saturating_sub(4)).max(1);
    let basis = SplineBasis {
        degree: 3,
        interior_knots: (1..=knots)
            .map(|i| lo + (hi - lo) * i as f64 / (knots + 1) as f64)
            .collect(),
        boundary: (lo, hi),
    };
    let k = basis.dim();
    let m = bins.len();
    let mut b = DMatrix::<f64>::zeros(m, k);
    for (i, bin) in bins.iter().enumerate() {
        for (c, v) in basis.evaluate(bin.0).into_iter().enumerate() {
            b[(i, c)] = v;
        }
    }
    let w: Vec<f64> = bins.iter().map(|t| t.2 as f64).collect();
    let wsum: f64 = w.iter().sum();
    let yv = DVector::from_iterator(m, bins.iter().map(|t| t.1));
    let mut btw = b.transpose();
    for i in 0..m {
        for c in 0..k {
            btw[(c, i)] *= w[i];
        }
    }
    let gram = &btw * &b;
    let rhs = &btw * &yv;
    let pen = second_difference_gram(k)?;

    let mut best: Option<(f64, f64, f64, DVector<f64>)> = None;
    for step in 0..=60 {
        let lambda = 10f64.powf(-6.0 + 0.2 * step as f64);
        let a = &gram + &pen * lambda;
        let Some(ch) = a.cholesky() else { continue };
        let coef = ch.solve(&rhs);
        let edf = ch.solve(&gram).trace();
        let fit = &b * &coef;
        let rss: f64 = (0..m).map(|i| w[i] * (yv[i] - fit[i]).powi(2)).sum();
        let denom = 1.0 - edf / m as f64;
        let gcv = (rss / wsum) / (denom * denom);
        if best.as_ref().is_none_or(|bst| gcv < bst.0) {
            best = Some((gcv, lambda, edf, coef));
        }
    }
    let (_, lambda, edf, coef) = best.ok_or(Error::NotPositiveDefinite("smoother system"))?;
    let g = opts.grid.max(2);
    let mut curve = SmoothCurve {
        x: (0..g)
            .map(|i| lo + (hi - lo) * i as f64 / (g - 1) as f64)
            .collect(),
        y: Vec::new(),
        lambda,
        edf,
        bins,
        basis,
        coef: coef.iter().copied().collect(),
    };
    curve.y = curve.x.iter().map(|&t| curve.predict(t)).collect();
    Ok(curve)
}
