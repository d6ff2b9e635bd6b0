use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hosprate"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn hosprate");
    assert!(
        out.status.success(),
        "hosprate {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    root: PathBuf,
    patients: PathBuf,
    hospitals: PathBuf,
    cc: PathBuf,
}

/// Simulated data and one CC fit with a held-out period, shared by all tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("hosprate-cli");
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        let config = root.join("generator.json");
        std::fs::write(&config, r#"{"n_hospitals": 60, "volume_log_mean": 4.0}"#).unwrap();
        let data = root.join("data");
        run(&[
            "simulate",
            "--config",
            s(&config),
            "--seed",
            "4",
            "--out",
            s(&data),
        ]);
        let fx = Fixture {
            patients: data.join("patients.csv"),
            hospitals: data.join("hospitals.csv"),
            cc: root.join("cc"),
            root,
        };
        fit(&fx, "CC", &fx.cc, "7");
        fx
    })
}

fn fit(fx: &Fixture, preset: &str, out: &Path, seed: &str) -> Output {
    run(&[
        "fit",
        "--patients",
        s(&fx.patients),
        "--hospitals",
        s(&fx.hospitals),
        "--preset",
        preset,
        "--cutoff",
        "4",
        "--iterations",
        "400",
        "--burnin",
        "100",
        "--thin",
        "3",
        "--chains",
        "2",
        "--seed",
        seed,
        "--out",
        s(out),
    ])
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn fit_writes_samples_and_meta() {
    let fx = fixture();
    for f in [
        "samples.csv",
        "meta.json",
        "run.json",
        "summary.csv",
        "manifest.json",
    ] {
        assert!(fx.cc.join(f).is_file(), "missing {f}");
    }
    let m = manifest(&fx.cc);
    assert_eq!(m["command"], "fit");
    assert_eq!(m["seed"], 7);
    assert!(m["files"]["samples.csv"].as_str().unwrap().len() == 64);
}

#[test]
fn missing_input_names_the_path() {
    let fx = fixture();
    let missing = fx.root.join("nope.csv");
    let out = bin()
        .args([
            "fit",
            "--patients",
            s(&missing),
            "--hospitals",
            s(&fx.hospitals),
        ])
        .args(["--out", s(&fx.root.join("never"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn bad_preset_is_a_user_error() {
    let fx = fixture();
    let out = bin()
        .args([
            "fit",
            "--patients",
            s(&fx.patients),
            "--hospitals",
            s(&fx.hospitals),
        ])
        .args(["--preset", "XYZ", "--out", s(&fx.root.join("never2"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let fx = fixture();
    let again = fx.root.join("cc_again");
    fit(fx, "CC", &again, "7");
    for f in ["samples.csv", "meta.json", "summary.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(fx.cc.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn report_counts_sum_in_every_stratum() {
    let fx = fixture();
    let out = fx.root.join("report");
    run(&["report", "--fit", s(&fx.cc), "--svg", "--out", s(&out)]);
    let rates = read_csv(&out.join("rates.csv"));
    let h = rates.len();
    assert_eq!(h, 60);
    let counts = read_csv(&out.join("class_counts.csv"));
    let strata: Vec<&str> = counts.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(strata, ["all", "Q1", "Q2", "Q3", "Q4"]);
    let mut quartile_total = 0;
    for row in &counts {
        let n: Vec<usize> = row[1..].iter().map(|v| v.parse().unwrap()).collect();
        assert_eq!(n[0] + n[1] + n[2], n[3]);
        if row[0] == "all" {
            assert_eq!(n[3], h);
        } else {
            quartile_total += n[3];
        }
    }
    assert_eq!(quartile_total, h);
    for f in ["raw", "P", "IS", "DS"] {
        assert!(out.join(format!("plot_{f}.csv")).is_file());
        assert!(out.join(format!("plot_{f}.svg")).is_file());
    }
}

#[test]
fn classify_emits_quartile_cross_tables() {
    let fx = fixture();
    let lc = fx.root.join("lc");
    fit(fx, "LC", &lc, "8");
    let out = fx.root.join("classify");
    run(&[
        "classify",
        "--fit",
        s(&fx.cc),
        "--against",
        s(&lc),
        "--out",
        s(&out),
    ]);
    let rows = read_csv(&out.join("cross_classify.csv"));
    for stratum in ["all", "lower_quartile", "upper_quartile"] {
        let total: usize = rows
            .iter()
            .filter(|r| r[0] == stratum)
            .flat_map(|r| r[2..].iter().map(|v| v.parse::<usize>().unwrap()))
            .sum();
        let expected = if stratum == "all" { 60 } else { 15 };
        assert_eq!(total, expected, "{stratum}");
    }
}

/// Local-linear Gaussian kernel smoother with leave-one-out bandwidth.
fn kernel_smooth(x: &[f64], y: &[f64], at: &[f64]) -> Vec<f64> {
    let fit = |xs: &[(f64, f64)], h: f64, a: f64| -> f64 {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(xi, yi) in xs {
            let d = xi - a;
            let w = (-0.5 * (d / h).powi(2)).exp();
            s0 += w;
            s1 += w * d;
            s2 += w * d * d;
            t0 += w * yi;
            t1 += w * d * yi;
        }
        (s2 * t0 - s1 * t1) / (s0 * s2 - s1 * s1)
    };
    let pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    let range = x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - x.iter().copied().fold(f64::INFINITY, f64::min);
    let mut best = (f64::INFINITY, range);
    for i in 0..30 {
        let h = range * 10f64.powf(-2.0 + i as f64 * 0.07);
        let err: f64 = (0..pts.len())
            .map(|j| {
                let rest: Vec<(f64, f64)> = pts
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, p)| *p)
                    .collect();
                (pts[j].1 - fit(&rest, h, pts[j].0)).powi(2)
            })
            .filter(|e| e.is_finite())
            .sum();
        if err < best.0 {
            best = (err, h);
        }
    }
    at.iter().map(|&a| fit(&pts, best.1, a)).collect()
}

#[test]
fn smooth_overlay_matches_kernel_smoother() {
    let fx = fixture();
    let out = fx.root.join("report_smooth");
    run(&["report", "--fit", s(&fx.cc), "--out", s(&out)]);
    for f in ["P", "DS"] {
        let pts = read_csv(&out.join(format!("plot_{f}.csv")));
        let x: Vec<f64> = pts.iter().map(|r| r[2].parse().unwrap()).collect();
        let y: Vec<f64> = pts.iter().map(|r| r[3].parse().unwrap()).collect();
        let curve = read_csv(&out.join(format!("smooth_{f}.csv")));
        let cx: Vec<f64> = curve.iter().map(|r| r[0].parse().unwrap()).collect();
        let cy: Vec<f64> = curve.iter().map(|r| r[1].parse().unwrap()).collect();
        let k = kernel_smooth(&x, &y, &cx);
        let rmse =
            (cy.iter().zip(&k).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / cy.len() as f64).sqrt();
        assert!(rmse < 0.01, "{f}: rmse {rmse}");
    }
}

fn bayes_factor(dir: &Path) -> f64 {
    let text = std::fs::read_to_string(dir.join("bayes_factor.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix("log_bayes_factor = "))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn compare_with_itself_is_zero() {
    let fx = fixture();
    let out = fx.root.join("self_compare");
    run(&[
        "compare",
        "--fit",
        s(&fx.cc),
        "--against",
        s(&fx.cc),
        "--out",
        s(&out),
    ]);
    assert_eq!(bayes_factor(&out), 0.0);
}

#[test]
fn simulate_fit_compare_end_to_end() {
    let fx = fixture();
    let sl = fx.root.join("sl");
    fit(fx, "SL", &sl, "9");
    let ab = fx.root.join("cmp_ab");
    let ba = fx.root.join("cmp_ba");
    run(&[
        "compare",
        "--fit",
        s(&sl),
        "--against",
        s(&fx.cc),
        "--out",
        s(&ab),
    ]);
    run(&[
        "compare",
        "--fit",
        s(&fx.cc),
        "--against",
        s(&sl),
        "--out",
        s(&ba),
    ]);
    let (x, y) = (bayes_factor(&ab), bayes_factor(&ba));
    assert!(x.is_finite());
    assert_eq!(x, -y);
    let m = manifest(&ab);
    assert_eq!(m["command"], "compare");
    assert!(m["files"]["bayes_factor.txt"].is_string());
}

#[test]
fn calibrate_reduces_k_and_records_it() {
    let fx = fixture();
    let study = fx.root.join("study.json");
    std::fs::write(
        &study,
        r#"{"quantile_volume_le": 0.25, "k": 500, "caliper_sd": 1.0}"#,
    )
    .unwrap();
    let out_dir = fx.root.join("calibrate");
    let out = run(&[
        "calibrate",
        "--fit",
        s(&fx.cc),
        "--study",
        s(&study),
        "--out",
        s(&out_dir),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("k reduced from 500"));
    let m = manifest(&out_dir);
    let notes: Vec<&str> = m["notes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n.as_str().unwrap())
        .collect();
    let used = notes
        .iter()
        .find(|n| n.starts_with("k used:"))
        .expect("k note");
    assert!(!used.starts_with("k used: 500"), "{used}");
    for f in [
        "balance.csv",
        "aggregation.csv",
        "matches.csv",
        "dropped.csv",
    ] {
        assert!(out_dir.join(f).is_file(), "missing {f}");
    }
}
