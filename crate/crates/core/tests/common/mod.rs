//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::HashMap;
use std::f64::consts::PI;

use hosprate::RngStream;
use rand_distr::{Distribution, Exp1};

/// `PG(1, c)` by its infinite convolution of exponentials, truncated at
/// `terms` with the mean of the remainder added back.
pub struct GammaSumPg {
    denom: Vec<f64>,
    tail: f64,
}

impl GammaSumPg {
    pub fn new(c: f64, terms: usize) -> Self {
        let shift = c * c / (4.0 * PI * PI);
        let den = |k: usize| {
            let h = k as f64 - 0.5;
            h * h + shift
        };
        let denom = (1..=terms).map(den).collect();
        let tail = (terms + 1..=terms + 2_000_000)
            .map(|k| 1.0 / den(k))
            .sum::<f64>();
        Self { denom, tail }
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let s: f64 = self
            .denom
            .iter()
            .map(|d| {
                let e: f64 = Exp1.sample(rng);
                e / d
            })
            .sum();
        (s + self.tail) / (2.0 * PI * PI)
    }
}

/// Exhaustive minimum-cost maximum assignment by memoized search over
/// (treated index, used-control mask). Returns `(matched pairs, cost)`.
pub fn brute_force_assignment(
    edges: &[Vec<(usize, i64)>],
    n_controls: usize,
    k: usize,
) -> (usize, i64) {
    assert!(n_controls <= 20);
    fn go(
        t: usize,
        used: u32,
        edges: &[Vec<(usize, i64)>],
        k: usize,
        memo: &mut HashMap<(usize, u32), (usize, i64)>,
    ) -> (usize, i64) {
        if t == edges.len() {
            return (0, 0);
        }
        if let Some(v) = memo.get(&(t, used)) {
            return *v;
        }
        let es = &edges[t];
        let mut best = (0usize, i64::MAX);
        let consider = |cand: (usize, i64), best: &mut (usize, i64)| {
            if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1) {
                *best = cand;
            }
        };
        // Choose any subset of at most k free admissible controls.
        let mut stack: Vec<(usize, u32, usize, i64)> = vec![(0, used, 0, 0)];
        while let Some((start, mask, taken, cost)) = stack.pop() {
            let (n, c) = go(t + 1, mask, edges, k, memo);
            consider((n + taken, c + cost), &mut best);
            if taken == k {
                continue;
            }
            for (i, &(ctl, w)) in es.iter().enumerate().skip(start) {
                if mask & (1 << ctl) == 0 {
                    stack.push((i + 1, mask | (1 << ctl), taken + 1, cost + w));
                }
            }
        }
        memo.insert((t, used), best);
        best
    }
    go(0, 0, edges, k, &mut HashMap::new())
}

/// Local-linear Gaussian-kernel regression evaluated at `at`.
pub fn local_linear(x: &[f64], y: &[f64], bandwidth: f64, at: f64) -> f64 {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let u = (xi - at) / bandwidth;
        let w = (-0.5 * u * u).exp();
        let dx = xi - at;
        s0 += w;
        s1 += w * dx;
        s2 += w * dx * dx;
        t0 += w * yi;
        t1 += w * dx * yi;
    }
    let det = s0 * s2 - s1 * s1;
    if det.abs() < 1e-12 * s0 * s2.max(1e-300) {
        t0 / s0
    } else {
        (s2 * t0 - s1 * t1) / det
    }
}

/// Bandwidth minimizing leave-one-out squared error over a log grid of
/// multiples of the range of `x`.
pub fn loocv_bandwidth(x: &[f64], y: &[f64]) -> f64 {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut best = (f64::INFINITY, range);
    for i in 0..30 {
        let h = range * 10f64.powf(-2.5 + i as f64 * 0.08);
        let mut err = 0.0;
        for j in 0..x.len() {
            let xs: Vec<f64> = x
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, v)| *v)
                .collect();
            let ys: Vec<f64> = y
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, v)| *v)
                .collect();
            let r = y[j] - local_linear(&xs, &ys, h, x[j]);
            err += r * r;
        }
        if err < best.0 {
            best = (err, h);
        }
    }
    best.1
}
