use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use hosprate::data::{load_dataset, split_by_period, write_dataset};
use hosprate::design::build_design;
use hosprate::gibbs::{
    run_chains, summarize_parameters, write_samples, ChainConfig, META_FILE, SAMPLES_FILE,
};
use hosprate::inference::{
    cross_classify, functional_draws, log_predictive_bayes_factor, predictive_log_likelihood,
    rate_report, volume_quartiles, Class, ExpectedMode, Functional, Interval, RateReport,
    StandardizeOptions,
};
use hosprate::matching::{
    aggregation_check, balance_table, cohort_groups, fit_propensity, match_patients,
    mean_abs_std_diff, CohortDef, RiskModel,
};
use hosprate::model::{ModelSpec, Preset};
use hosprate::smooth::{smooth, SmoothOptions};
use hosprate::synth::{generate, GeneratorConfig};

use crate::output::{opt, scatter_svg, Outputs};
use crate::run::{LoadedFit, RunInfo, RUN_FILE};
use crate::{
    CalibrateArgs, ClassifyArgs, Cli, Command, CompareArgs, FitArgs, FunctionalArg, Mode,
    ReportArgs, SimulateArgs, StandardizeArgs, StdOpts,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let mut out = Outputs::new(&cli.out)?;
    let name = match &cli.command {
        Command::Fit(a) => {
            fit(a, cli.seed, &mut out)?;
            "fit"
        }
        Command::Report(a) => {
            report(a, cli.seed, &mut out)?;
            "report"
        }
        Command::Standardize(a) => {
            standardize(a, cli.seed, &mut out)?;
            "standardize"
        }
        Command::Classify(a) => {
            classify(a, cli.seed, &mut out)?;
            "classify"
        }
        Command::Compare(a) => {
            compare(a, &mut out)?;
            "compare"
        }
        Command::Calibrate(a) => {
            calibrate(a, &mut out)?;
            "calibrate"
        }
        Command::Simulate(a) => {
            simulate(a, cli.seed, &mut out)?;
            "simulate"
        }
    };
    let config = serde_json::to_value(&cli.command)?;
    out.finish(name, cli.seed, &config)?;
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn fit(a: &FitArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let spec = match &a.model {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            ModelSpec::from_json(&text).with_context(|| format!("model config {}", p.display()))?
        }
        None => ModelSpec::preset(a.preset.parse::<Preset>()?),
    };
    let full = load_dataset(&a.patients, &a.hospitals)?;
    let train = match a.cutoff {
        Some(c) => {
            let split = split_by_period(&full, c)?;
            if !split.cold_start.is_empty() {
                out.note(format!(
                    "{} hospitals have held-out patients but no training patients",
                    split.cold_start.len()
                ));
            }
            split.train
        }
        None => full,
    };
    let config = ChainConfig {
        iterations: a.iterations,
        burnin: a.burnin,
        thin: a.thin,
        seed,
        n_chains: a.chains,
        delta_step: a.delta_step,
    };
    let design = build_design(&train, &spec)?;
    let samples = run_chains(&design, &spec, &config)?;
    write_samples(&samples, &out.path(""))?;
    out.record(SAMPLES_FILE);
    out.record(META_FILE);
    let info = RunInfo {
        patients: std::path::absolute(&a.patients)?,
        hospitals: std::path::absolute(&a.hospitals)?,
        cutoff: a.cutoff,
    };
    out.write(RUN_FILE, &(serde_json::to_string_pretty(&info)? + "\n"))?;

    let summary = summarize_parameters(&samples);
    let mut csv = String::from("parameter,mean,sd,lo,hi\n");
    println!(
        "{:<24} {:>10} {:>10} {:>10} {:>10}",
        "parameter", "mean", "sd", "2.5%", "97.5%"
    );
    for s in &summary {
        let _ = writeln!(csv, "{},{},{},{},{}", s.name, s.mean, s.sd, s.lo, s.hi);
        println!(
            "{:<24} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            s.name, s.mean, s.sd, s.lo, s.hi
        );
    }
    out.write("summary.csv", &csv)?;
    if spec.has_delta() {
        for (c, acc) in samples.meta.delta_acceptance.iter().enumerate() {
            if let Some(acc) = acc {
                println!("chain {c}: delta acceptance {acc:.3}");
            }
        }
    }
    for w in &samples.meta.warnings {
        eprintln!("warning: {w}");
        out.note(w.clone());
    }
    println!(
        "{} draws from {} chains, model {}, {} hospitals, {} patients",
        samples.len(),
        config.n_chains,
        spec.label(),
        train.n_hospitals(),
        train.n_patients()
    );
    Ok(())
}

fn std_options(o: &StdOpts, seed: u64) -> StandardizeOptions {
    StandardizeOptions {
        mode: match o.mode {
            Mode::All => ExpectedMode::AllHospitals,
            Mode::HcMean => ExpectedMode::HcMean,
        },
        volume_weighted: o.volume_weighted,
        fast_expected: o.fast,
        fast_direct: o.fast,
        budget: o.budget,
        seed,
        ..StandardizeOptions::default()
    }
}

fn report_for(fit: &LoadedFit, o: &StdOpts, seed: u64, threshold: f64) -> Result<RateReport> {
    let opts = std_options(o, seed);
    Ok(rate_report(
        &fit.samples,
        &fit.train,
        &fit.design,
        &opts,
        threshold,
    )?)
}

fn write_report_csv(out: &mut Outputs, name: &str, r: &RateReport) -> Result<()> {
    r.write_csv(&out.path(name))?;
    out.record(name);
    Ok(())
}

fn class_counts_csv(r: &RateReport) -> String {
    let mut s = String::from("stratum,Low,Average,High,total\n");
    for (name, c) in r.class_counts() {
        let _ = writeln!(
            s,
            "{name},{},{},{},{}",
            c[0],
            c[1],
            c[2],
            c.iter().sum::<usize>()
        );
    }
    s
}

fn print_counts(r: &RateReport) {
    println!(
        "{:<8} {:>6} {:>8} {:>6}",
        "stratum", "Low", "Average", "High"
    );
    for (name, c) in r.class_counts() {
        println!("{name:<8} {:>6} {:>8} {:>6}", c[0], c[1], c[2]);
    }
}

fn report(a: &ReportArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let fit = LoadedFit::load(&a.fit)?;
    let r = report_for(&fit, &a.std, seed, a.threshold)?;
    write_report_csv(out, "rates.csv", &r)?;
    out.write("class_counts.csv", &class_counts_csv(&r))?;
    for n in &r.notes {
        out.note(n.clone());
    }

    let series: [(
        &str,
        Box<dyn Fn(&hosprate::inference::RateRow) -> Option<f64>>,
    ); 4] = [
        ("raw", Box::new(|row| row.raw)),
        ("P", Box::new(|row| row.p.map(|i| i.mean))),
        ("IS", Box::new(|row| row.is.map(|i| i.mean))),
        ("DS", Box::new(|row| Some(row.ds.mean))),
    ];
    for (name, get) in &series {
        let mut csv = String::from("hospital_id,volume,log_volume,rate\n");
        let mut pts = Vec::new();
        for row in &r.rows {
            if let Some(v) = get(row) {
                let lv = (row.volume as f64).ln_1p();
                let _ = writeln!(csv, "{},{},{},{}", row.hospital_id, row.volume, lv, v);
                pts.push((lv, v));
            }
        }
        out.write(&format!("plot_{name}.csv"), &csv)?;
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let line = match smooth(&xs, &ys, &SmoothOptions::default()) {
            Ok(curve) => {
                let mut s = String::from("log_volume,rate\n");
                for (x, y) in curve.x.iter().zip(&curve.y) {
                    let _ = writeln!(s, "{x},{y}");
                }
                out.write(&format!("smooth_{name}.csv"), &s)?;
                curve.x.into_iter().zip(curve.y).collect()
            }
            Err(e) => {
                out.note(format!("no smooth overlay for {name}: {e}"));
                Vec::new()
            }
        };
        if a.svg {
            let svg = scatter_svg(
                &format!("{name} rate by volume"),
                "log(volume + 1)",
                "rate",
                &pts,
                &line,
            );
            out.write(&format!("plot_{name}.svg"), &svg)?;
        }
    }
    print_counts(&r);
    println!("ybar {:.4}, {} draws", r.ybar, r.draws);
    Ok(())
}

fn standardize(a: &StandardizeArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let fit = LoadedFit::load(&a.fit)?;
    let f = match a.functional {
        FunctionalArg::P => Functional::P,
        FunctionalArg::Is => Functional::Is,
        FunctionalArg::Ds => Functional::Ds,
    };
    let opts = std_options(&a.std, seed);
    let fd = functional_draws(&fit.samples, &fit.design, f, &opts)?;
    let mut csv = String::from("hospital_id,volume,n,mean,lo,hi\n");
    for (h, rec) in fit.train.hospitals().iter().enumerate() {
        let i = Interval::from_draws(&fd.values[h]);
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            rec.hospital_id,
            rec.volume,
            fit.train.n_h(h),
            opt(i.map(|i| i.mean)),
            opt(i.map(|i| i.lo)),
            opt(i.map(|i| i.hi))
        );
    }
    for n in &fd.notes {
        out.note(n.clone());
    }
    out.write(&format!("standardized_{f}.csv"), &csv)?;
    println!(
        "{f}: {} hospitals, {} draws used",
        fd.values.len(),
        fd.draws_used.len()
    );
    Ok(())
}

fn classify(a: &ClassifyArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let fit = LoadedFit::load(&a.fit)?;
    let r = report_for(&fit, &a.std, seed, a.threshold)?;
    let q = r.volume_quartiles();
    let mut csv = String::from("hospital_id,volume,quartile,DS_lo,DS_hi,class\n");
    for (row, qk) in r.rows.iter().zip(&q) {
        let _ = writeln!(
            csv,
            "{},{},{qk},{},{},{}",
            row.hospital_id, row.volume, row.ds.lo, row.ds.hi, row.class
        );
    }
    out.write("classes.csv", &csv)?;
    out.write("class_counts.csv", &class_counts_csv(&r))?;
    print_counts(&r);

    if let Some(other) = &a.against {
        let fit_b = LoadedFit::load(other)?;
        let rb = report_for(&fit_b, &a.std, seed, a.threshold)?;
        let (la, lb) = (r.labels(), rb.labels());
        let volume: Vec<u64> = r.rows.iter().map(|x| x.volume).collect();
        let quart = volume_quartiles(&volume);
        let ids = |k: u8| -> std::collections::BTreeSet<String> {
            r.rows
                .iter()
                .zip(&quart)
                .filter(|(_, q)| **q == k)
                .map(|(row, _)| row.hospital_id.clone())
                .collect()
        };
        let mut s = String::from("stratum,row_class,Low,Average,High\n");
        let (lower, upper) = (ids(1), ids(4));
        for (name, keep) in [
            ("all", None),
            ("lower_quartile", Some(&lower)),
            ("upper_quartile", Some(&upper)),
        ] {
            let t = cross_classify(&la, &lb, keep)?;
            println!("{name}: rows {} / columns {}", fit.label(), fit_b.label());
            for (i, c) in Class::ALL.iter().enumerate() {
                let row = t.counts[i];
                let _ = writeln!(s, "{name},{c},{},{},{}", row[0], row[1], row[2]);
                println!("  {c:<8} {:>6} {:>8} {:>6}", row[0], row[1], row[2]);
            }
        }
        out.write("cross_classify.csv", &s)?;
    }
    Ok(())
}

fn compare(a: &CompareArgs, out: &mut Outputs) -> Result<()> {
    let fa = LoadedFit::load(&a.fit)?;
    let fb = LoadedFit::load(&a.against)?;
    if fa.info != fb.info {
        bail!("the two fits were run on different inputs or splits");
    }
    let validation = fa.validation()?;
    let la = predictive_log_likelihood(&fa.samples, &fa.design, validation)?;
    let lb = predictive_log_likelihood(&fb.samples, &fb.design, validation)?;
    let bf = log_predictive_bayes_factor(fa.model(), fb.model(), validation)?;
    let mut s = String::new();
    let _ = writeln!(s, "model_a = {}", fa.label());
    let _ = writeln!(s, "model_b = {}", fb.label());
    let _ = writeln!(s, "validation_patients = {}", validation.n_patients());
    let _ = writeln!(s, "draws_a = {}", fa.samples.len());
    let _ = writeln!(s, "draws_b = {}", fb.samples.len());
    let _ = writeln!(s, "log_predictive_a = {la}");
    let _ = writeln!(s, "log_predictive_b = {lb}");
    let _ = writeln!(s, "log_bayes_factor = {bf}");
    out.write("bayes_factor.txt", &s)?;
    print!("{s}");
    Ok(())
}

fn calibrate(a: &CalibrateArgs, out: &mut Outputs) -> Result<()> {
    let fits: Vec<LoadedFit> = a
        .fits
        .iter()
        .map(|d| LoadedFit::load(d))
        .collect::<Result<_>>()?;
    let first = &fits[0];
    if fits.iter().any(|f| f.info != first.info) {
        bail!("calibration fits must share inputs and split");
    }
    let validation = first.validation()?;
    let text = std::fs::read_to_string(&a.study)
        .with_context(|| format!("cannot read {}", a.study.display()))?;
    let def = CohortDef::from_json(&text)
        .with_context(|| format!("study definition {}", a.study.display()))?;
    let groups = cohort_groups(validation, &def)?;
    let prop = fit_propensity(validation, &groups)?;
    for n in &prop.notes {
        eprintln!("warning: {n}");
        out.note(n.clone());
    }
    let risk = RiskModel::from_fit(first.model())?.scores(validation);
    let study = match_patients(validation, &def, &groups, &prop, &risk)?;
    for w in &study.warnings {
        eprintln!("warning: {w}");
        out.note(w.clone());
    }
    out.note(format!(
        "k used: {} (requested {})",
        study.k, study.k_requested
    ));
    out.note(format!("matching method: {:?}", study.method));

    let balance = balance_table(&study);
    let mut s = String::from(
        "covariate,treated,matched_treated,matched_control,all_control,pooled_sd,std_diff_before,std_diff_after\n",
    );
    for r in &balance {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.name,
            r.treated,
            r.matched_treated,
            r.matched_control,
            r.all_control,
            opt(r.pooled_sd),
            opt(r.std_diff_before),
            opt(r.std_diff_after)
        );
    }
    out.write("balance.csv", &s)?;

    let labeled: Vec<(String, _)> = fits.iter().map(|f| (f.label(), f.model())).collect();
    let agg = aggregation_check(&study, validation, &labeled)?;
    let mut s = String::from("row,treated,matched_controls,all_controls\n");
    for r in &agg {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.label, r.treated, r.matched_controls, r.all_controls
        );
    }
    out.write("aggregation.csv", &s)?;

    let ids = validation.patients();
    let mut s = String::from("treated_patient_id,control_patient_ids\n");
    for set in &study.sets {
        let c: Vec<&str> = set
            .controls
            .iter()
            .map(|&j| ids[j].patient_id.as_str())
            .collect();
        let _ = writeln!(s, "{},{}", ids[set.treated].patient_id, c.join(";"));
    }
    out.write("matches.csv", &s)?;
    let mut s = String::from("treated_patient_id,reason\n");
    for (j, reason) in &study.dropped {
        let _ = writeln!(s, "{},{reason:?}", ids[*j].patient_id);
    }
    out.write("dropped.csv", &s)?;

    let (before, after) = mean_abs_std_diff(&balance);
    println!(
        "{} treated matched ({} dropped), k = {}, mean |std diff| {before:.3} -> {after:.3}",
        study.n_matched(),
        study.dropped.len(),
        study.k
    );
    println!(
        "{:<12} {:>10} {:>10} {:>10}",
        "row", "treated", "matched", "all ctrl"
    );
    for r in &agg {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}",
            r.label, r.treated, r.matched_controls, r.all_controls
        );
    }
    Ok(())
}

fn simulate(a: &SimulateArgs, seed: u64, out: &mut Outputs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str::<GeneratorConfig>(&text)
                .with_context(|| format!("generator config {}", p.display()))?
        }
        None => GeneratorConfig::default(),
    };
    cfg.seed = seed;
    let (d, truth) = generate(&cfg)?;
    write_dataset(&d, out.path("patients.csv"), out.path("hospitals.csv"))?;
    out.record("patients.csv");
    out.record("hospitals.csv");
    out.write(
        "truth.json",
        &(serde_json::to_string_pretty(&truth)? + "\n"),
    )?;
    out.write(
        "generator.json",
        &(serde_json::to_string_pretty(&cfg)? + "\n"),
    )?;
    println!(
        "{} hospitals, {} patients, ybar {:.4}",
        d.n_hospitals(),
        d.n_patients(),
        d.ybar()
    );
    Ok(())
}
