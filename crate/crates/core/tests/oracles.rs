mod common;

use common::{brute_force_assignment, local_linear, loocv_bandwidth, GammaSumPg};
use hosprate::matching::{greedy_assignment, optimal_assignment};
use hosprate::pg::{pg1_mean, sample_pg1};
use hosprate::smooth::{smooth, SmoothOptions};
use hosprate::stats::{ks_two_sample, mean, sample_variance};
use hosprate::RngStream;
use rand::RngExt;

#[test]
fn pg_sampler_agrees_with_gamma_sum() {
    for (i, c) in [0.0, 0.7, 3.0].into_iter().enumerate() {
        let mut r1 = RngStream::new(11, i as u64);
        let mut r2 = RngStream::new(12, i as u64);
        let fast: Vec<f64> = (0..20_000)
            .map(|_| sample_pg1(c, &mut r1).unwrap())
            .collect();
        let oracle = GammaSumPg::new(c, 200);
        let slow: Vec<f64> = (0..5_000).map(|_| oracle.sample(&mut r2)).collect();
        let ks = ks_two_sample(&fast, &slow);
        assert!(ks.p_value > 0.001, "c={c}: {ks:?}");
        let se = (sample_variance(&slow) / slow.len() as f64).sqrt();
        assert!(
            (mean(&slow) - pg1_mean(c)).abs() < 4.0 * se,
            "oracle mean off at c={c}"
        );
    }
}

fn random_instance(rng: &mut RngStream) -> (Vec<Vec<(usize, i64)>>, usize, usize) {
    let t = rng.random_range(1..=6usize);
    let c = rng.random_range(1..=12usize);
    let k = rng.random_range(1..=2usize);
    let density: f64 = rng.random_range(0.2..1.0);
    let edges = (0..t)
        .map(|_| {
            (0..c)
                .filter_map(|ctl| {
                    let keep = rng.random::<f64>() < density;
                    let cost = rng.random_range(0..1000i64);
                    keep.then_some((ctl, cost))
                })
                .collect()
        })
        .collect();
    (edges, c, k)
}

#[test]
fn flow_matches_exhaustive_search() {
    let mut rng = RngStream::new(3, 0);
    for _ in 0..1500 {
        let (edges, c, k) = random_instance(&mut rng);
        let got = optimal_assignment(&edges, c, k);
        let (pairs, cost) = brute_force_assignment(&edges, c, k);
        let n: usize = got.sets.iter().map(Vec::len).sum();
        assert_eq!((n, got.total), (pairs, cost), "{edges:?} k={k}");
        let mut seen = vec![false; c];
        for (t, set) in got.sets.iter().enumerate() {
            assert!(set.len() <= k);
            for &ctl in set {
                assert!(!seen[ctl], "control reused");
                seen[ctl] = true;
                assert!(edges[t].iter().any(|e| e.0 == ctl), "inadmissible pair");
            }
        }
    }
}

#[test]
fn greedy_never_beats_optimal() {
    let mut rng = RngStream::new(4, 0);
    for _ in 0..500 {
        let (edges, c, k) = random_instance(&mut rng);
        let opt = optimal_assignment(&edges, c, k);
        let gr = greedy_assignment(&edges, c, k);
        let n = |a: &hosprate::matching::Assignment| a.sets.iter().map(Vec::len).sum::<usize>();
        assert!(n(&gr) < n(&opt) || (n(&gr) == n(&opt) && gr.total >= opt.total));
    }
}

#[test]
fn spline_smoother_tracks_kernel_smoother() {
    let mut rng = RngStream::new(5, 0);
    let x: Vec<f64> = (0..400).map(|_| rng.random_range(1.0..6.0)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|t| 0.12 + 0.06 / (1.0 + ((t - 3.0) / 0.4).exp()) + 0.02 * (rng.random::<f64>() - 0.5))
        .collect();
    let curve = smooth(&x, &y, &SmoothOptions::default()).unwrap();
    let h = loocv_bandwidth(&x, &y);
    let sq: Vec<f64> = curve
        .x
        .iter()
        .zip(&curve.y)
        .map(|(&a, &b)| (b - local_linear(&x, &y, h, a)).powi(2))
        .collect();
    let rmse = mean(&sq).sqrt();
    assert!(rmse < 0.01, "rmse {rmse}");
}
