//! Exact Pólya-Gamma PG(1, c) sampling.
//!
//! The sampler follows Devroye's alternating-series method as adapted to the
//! Pólya-Gamma family: propose from a mixture of a truncated inverse Gaussian
//! (left of `t = 0.64`) and a shifted exponential (right of `t`), then accept
//! or reject by evaluating partial sums of the Jacobi density series until
//! they bracket the uniform threshold. Draws are exact; expected proposals
//! per draw stay below about 1.001 for every tilt.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::RngExt;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Crossover between the inverse-Gaussian and exponential proposal pieces.
const TRUNC: f64 = 0.64;
const PI_SQ_OVER_8: f64 = PI * PI / 8.0;

/// Draw one variate from PG(1, c).
pub fn sample_pg1(c: f64, rng: &mut RngStream) -> Result<f64> {
    if !c.is_finite() {
        return Err(Error::Invalid(format!(
            "Polya-Gamma tilt must be finite, got {c}"
        )));
    }
    Ok(draw_pg1(c, rng))
}

/// Infallible core of [`sample_pg1`]; `c` must be finite.
pub(crate) fn draw_pg1(c: f64, rng: &mut RngStream) -> f64 {
    // Work with J*(1, z), z = |c|/2; PG(1, c) = J*(1, z) / 4.
    let z = 0.5 * c.abs();
    let k = PI_SQ_OVER_8 + 0.5 * z * z;
    let p = FRAC_PI_2 / k * (-k * TRUNC).exp();
    let q = 2.0 * inverse_gaussian_mass_below(z);
    let prob_exponential = p / (p + q);

    loop {
        let u: f64 = rng.random();
        let x = if u < prob_exponential {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / k
        } else {
            truncated_inverse_gaussian(z, rng)
        };

        let mut s = series_coefficient(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0usize;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coefficient(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coefficient(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// `exp(-z) * P(IG(1/z, 1) < t)`, written to stay finite for large `z`.
fn inverse_gaussian_mass_below(z: f64) -> f64 {
    let root_t = TRUNC.sqrt();
    if z == 0.0 {
        // mu -> infinity: P(X < t) = 2 Phi(-1/sqrt(t)).
        return 2.0 * std_normal_cdf(-1.0 / root_t);
    }
    let a = (TRUNC * z - 1.0) / root_t;
    let b = -(TRUNC * z + 1.0) / root_t;
    let left = (-z).exp() * std_normal_cdf(a);
    let phi_b = std_normal_cdf(b);
    let right = if phi_b > 0.0 {
        (z + phi_b.ln()).exp()
    } else {
        0.0
    };
    left + right
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Piecewise series coefficient `a_n(x)` of the J*(1, 0) density.
#[inline]
fn series_coefficient(n: usize, x: f64) -> f64 {
    let m = n as f64 + 0.5;
    if x <= TRUNC {
        let r = 2.0 / (PI * x);
        PI * m * r * r.sqrt() * (-2.0 * m * m / x).exp()
    } else {
        PI * m * (-0.5 * m * m * PI * PI * x).exp()
    }
}

/// Inverse Gaussian IG(mu = 1/z, lambda = 1) truncated to (0, TRUNC).
fn truncated_inverse_gaussian(z: f64, rng: &mut RngStream) -> f64 {
    let mu = if z > 0.0 { 1.0 / z } else { f64::INFINITY };
    if mu > TRUNC {
        // Propose from the z = 0 law (a scaled 1/chi^2_1 restricted to x < t)
        // and thin by the exponential tilt.
        loop {
            let e = loop {
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                if e1 * e1 <= 2.0 * e2 / TRUNC {
                    break e1;
                }
            };
            let denom = 1.0 + TRUNC * e;
            let x = TRUNC / (denom * denom);
            let accept = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= accept {
                return x;
            }
        }
    } else {
        loop {
            let n: f64 = StandardNormal.sample(rng);
            let y = n * n;
            let mu_y = mu * y;
            let mut x = mu + 0.5 * mu * mu_y - 0.5 * mu * (4.0 * mu_y + mu_y * mu_y).sqrt();
            if rng.random::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= TRUNC {
                return x;
            }
        }
    }
}

/// Mean of PG(1, c): `tanh(c/2) / (2c)`, with the limit 1/4 at zero.
pub fn pg1_mean(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-4 {
        let c2 = c * c;
        0.25 - c2 / 48.0 + c2 * c2 / 480.0
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

/// Variance of PG(1, c): `sech^2(c/2) (sinh c - c) / (4 c^3)`, limit 1/24.
pub fn pg1_variance(c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-2 {
        let c2 = c * c;
        1.0 / 24.0 - c2 / 120.0 + 17.0 * c2 * c2 / 13440.0 - 31.0 * c2 * c2 * c2 / 181440.0
    } else {
        let sech = 1.0 / (0.5 * c).cosh();
        sech * sech * (c.sinh() - c) / (4.0 * c * c * c)
    }
}
