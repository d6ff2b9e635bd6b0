//! Posterior rate functionals: hospital rates, indirect and direct
//! standardization, intervals, classification and predictive Bayes factors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::design::DesignBundle;
use crate::error::{Error, Result};
use crate::gibbs::{ParamState, PosteriorSamples};
use crate::model::{MeanFamily, ModelSpec};
use crate::rng::RngStream;
use crate::stats::{bernoulli_logpmf, log_mean_exp, logistic, quantile_sorted};

/// Reference effect used for the expected rate `E_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedMode {
    /// Average of the hospital's patients' rates over every hospital effect.
    #[default]
    AllHospitals,
    /// Rates at the population mean effect `mu_alpha` (constant mean only).
    HcMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    P,
    Is,
    Ds,
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Functional::P => "P",
            Functional::Is => "IS",
            Functional::Ds => "DS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StandardizeOptions {
    pub mode: ExpectedMode,
    /// Weight hospitals by volume in the `E_h` average.
    pub volume_weighted: bool,
    /// Replace the exact `E_h` double sum by the rate at the average effect.
    pub fast_expected: bool,
    /// Replace the exact `P^DS_h` by the rate of an average patient.
    pub fast_direct: bool,
    /// Cap on `S * H * N` for the exact double sums.
    pub budget: f64,
    /// Patient subsample size used for `P^DS` once the cap is exceeded.
    pub subsample: usize,
    pub seed: u64,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self {
            mode: ExpectedMode::AllHospitals,
            volume_weighted: false,
            fast_expected: false,
            fast_direct: false,
            budget: 1e10,
            subsample: 10_000,
            seed: 0,
        }
    }
}

/// Linear predictor pieces of one draw: for patient `j` sent to hospital `h`,
/// `eta = alpha_h + base_j + slope_j * log(vol_h + 1)`.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    pub base: Vec<f64>,
    /// Empty without the interaction.
    pub slope: Vec<f64>,
    pub log_volume: &'a [f64],
}

impl<'a> Predictor<'a> {
    pub fn new(design: &'a DesignBundle, beta: &[f64]) -> Self {
        let n = design.n();
        let mut base = Vec::with_capacity(n);
        let mut slope = Vec::new();
        match design.interaction {
            None => base.extend((0..n).map(|j| dot(design.row(j), beta))),
            Some(c) => {
                let (center, scale) = (design.transform.center[c], design.transform.scale[c]);
                let b = beta[c];
                slope.reserve(n);
                for j in 0..n {
                    let row = design.row(j);
                    base.push(dot(row, beta) - b * row[c] - b * center / scale);
                    slope.push(b * design.age[j] / scale);
                }
            }
        }
        Self {
            base,
            slope,
            log_volume: &design.hospitals.log_volume,
        }
    }

    #[inline]
    pub fn eta(&self, j: usize, alpha: f64, h: usize) -> f64 {
        match self.slope.get(j) {
            Some(s) => alpha + self.base[j] + s * self.log_volume[h],
            None => alpha + self.base[j],
        }
    }

    pub fn has_interaction(&self) -> bool {
        !self.slope.is_empty()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rate of patient `j` treated at hospital `target`, with the interaction
/// column recomputed for the target's volume.
pub fn patient_rate(draw: &ParamState, design: &DesignBundle, j: usize, target: usize) -> f64 {
    let row = design.row(j);
    let mut eta = draw.alpha[target];
    for (c, (x, b)) in row.iter().zip(&draw.beta).enumerate() {
        if Some(c) == design.interaction {
            eta += b * design.interaction_at(j, target).unwrap_or(*x);
        } else {
            eta += x * b;
        }
    }
    logistic(eta)
}

fn require_patients(design: &DesignBundle, h: usize) -> Result<()> {
    if design.n_h(h) == 0 {
        return Err(Error::Invalid(format!(
            "hospital {} has no patients",
            design.hospitals.hospital_ids[h]
        )));
    }
    Ok(())
}

/// `P_h`: mean rate of the hospital's own patients at the hospital.
pub fn hospital_rate_p(draw: &ParamState, design: &DesignBundle, h: usize) -> Result<f64> {
    require_patients(design, h)?;
    let s: f64 = design
        .rows_of(h)
        .map(|j| patient_rate(draw, design, j, h))
        .sum();
    Ok(s / design.n_h(h) as f64)
}

fn hospital_weights(design: &DesignBundle, volume_weighted: bool) -> Vec<f64> {
    let h = design.n_hospitals();
    let total: f64 = design.hospitals.volume.iter().sum();
    if volume_weighted && total > 0.0 {
        design.hospitals.volume.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / h as f64; h]
    }
}

fn check_mode(spec: &ModelSpec, opts: &StandardizeOptions) -> Result<()> {
    if opts.mode == ExpectedMode::HcMean && spec.mean != MeanFamily::Constant {
        return Err(Error::Invalid(
            "the mu_alpha reference requires the constant mean family".into(),
        ));
    }
    Ok(())
}

/// `E_h` for every hospital with patients (`None` otherwise).
pub fn expected_rates(
    draw: &ParamState,
    design: &DesignBundle,
    spec: &ModelSpec,
    opts: &StandardizeOptions,
) -> Result<Vec<Option<f64>>> {
    check_mode(spec, opts)?;
    let pred = Predictor::new(design, &draw.beta);
    Ok(expected_with(draw, design, &pred, opts))
}

fn expected_with(
    draw: &ParamState,
    design: &DesignBundle,
    pred: &Predictor<'_>,
    opts: &StandardizeOptions,
) -> Vec<Option<f64>> {
    let h_count = design.n_hospitals();
    let w = hospital_weights(design, opts.volume_weighted);
    let mu = draw.hyper.theta.first().copied().unwrap_or(0.0);
    let abar: f64 = draw.alpha.iter().zip(&w).map(|(a, w)| a * w).sum();
    let vbar: f64 = pred.log_volume.iter().zip(&w).map(|(v, w)| v * w).sum();
    (0..h_count)
        .map(|h| {
            let rows = design.rows_of(h);
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            let s: f64 = match opts.mode {
                ExpectedMode::HcMean => rows.map(|j| logistic(pred.eta(j, mu, h))).sum(),
                ExpectedMode::AllHospitals if opts.fast_expected => rows
                    .map(|j| {
                        let slope = pred.slope.get(j).map_or(0.0, |s| s * vbar);
                        logistic(abar + pred.base[j] + slope)
                    })
                    .sum(),
                ExpectedMode::AllHospitals => rows
                    .map(|j| {
                        let mut acc = 0.0;
                        for (k, (a, wk)) in draw.alpha.iter().zip(&w).enumerate() {
                            acc += wk * logistic(pred.eta(j, *a, k));
                        }
                        acc
                    })
                    .sum(),
            };
            Some(s / n)
        })
        .collect()
}

/// `E_h` for one hospital.
pub fn expected_rate_e(
    draw: &ParamState,
    design: &DesignBundle,
    spec: &ModelSpec,
    h: usize,
    opts: &StandardizeOptions,
) -> Result<f64> {
    require_patients(design, h)?;
    check_mode(spec, opts)?;
    let pred = Predictor::new(design, &draw.beta);
    let w = hospital_weights(design, opts.volume_weighted);
    let rows = design.rows_of(h);
    let n = rows.len() as f64;
    let s: f64 = match opts.mode {
        ExpectedMode::HcMean => rows
            .map(|j| logistic(pred.eta(j, draw.hyper.theta[0], h)))
            .sum(),
        ExpectedMode::AllHospitals if opts.fast_expected => {
            let abar: f64 = draw.alpha.iter().zip(&w).map(|(a, w)| a * w).sum();
            let vbar: f64 = pred.log_volume.iter().zip(&w).map(|(v, w)| v * w).sum();
            rows.map(|j| {
                logistic(abar + pred.base[j] + pred.slope.get(j).map_or(0.0, |s| s * vbar))
            })
            .sum()
        }
        ExpectedMode::AllHospitals => rows
            .map(|j| {
                (0..design.n_hospitals())
                    .map(|k| w[k] * logistic(pred.eta(j, draw.alpha[k], k)))
                    .sum::<f64>()
            })
            .sum(),
    };
    Ok(s / n)
}

/// Mean outcome of a design.
pub fn design_ybar(design: &DesignBundle) -> f64 {
    design.y.iter().filter(|y| **y).count() as f64 / design.n() as f64
}

/// `P^IS_h = (P_h / E_h) * ybar`.
pub fn indirect_standardized(
    draw: &ParamState,
    design: &DesignBundle,
    spec: &ModelSpec,
    h: usize,
    opts: &StandardizeOptions,
) -> Result<f64> {
    let p = hospital_rate_p(draw, design, h)?;
    let e = expected_rate_e(draw, design, spec, h, opts)?;
    Ok(p / e * design_ybar(design))
}

/// `P^DS_h`: the hospital's rate over the whole patient pool.
pub fn direct_standardized(draw: &ParamState, design: &DesignBundle, h: usize) -> f64 {
    let s: f64 = (0..design.n())
        .map(|j| patient_rate(draw, design, j, h))
        .sum();
    s / design.n() as f64
}

/// `P^DS_h` for every hospital. `patients` restricts the outer sum.
fn direct_with(
    draw: &ParamState,
    pred: &Predictor<'_>,
    patients: Option<&[usize]>,
    fast: bool,
) -> Vec<f64> {
    let all: Vec<usize>;
    let idx = match patients {
        Some(p) => p,
        None => {
            all = (0..pred.base.len()).collect();
            &all
        }
    };
    let n = idx.len() as f64;
    if fast {
        let bbar = idx.iter().map(|&j| pred.base[j]).sum::<f64>() / n;
        let sbar = if pred.has_interaction() {
            idx.iter().map(|&j| pred.slope[j]).sum::<f64>() / n
        } else {
            0.0
        };
        return draw
            .alpha
            .iter()
            .zip(pred.log_volume)
            .map(|(a, v)| logistic(a + bbar + sbar * v))
            .collect();
    }
    draw.alpha
        .iter()
        .enumerate()
        .map(|(h, a)| {
            idx.iter()
                .map(|&j| logistic(pred.eta(j, *a, h)))
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Posterior mean and central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    /// Mean and 2.5% / 97.5% quantiles (linear interpolation between order
    /// statistics). `None` for an empty sample.
    pub fn from_draws(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = (values.iter().sum::<f64>() / values.len() as f64)
            .clamp(sorted[0], sorted[sorted.len() - 1]);
        // Keep lo <= mean <= hi exact under rounding.
        let lo = quantile_sorted(&sorted, 0.025).min(mean);
        let hi = quantile_sorted(&sorted, 0.975).max(mean);
        Some(Self { mean, lo, hi })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Class {
    Low,
    Average,
    High,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Low, Class::Average, Class::High];

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Class::Low => "Low",
            Class::Average => "Average",
            Class::High => "High",
        })
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.15;

/// Low if the interval lies entirely below `threshold`, High if entirely
/// above, Average otherwise.
pub fn classify_interval(lo: f64, hi: f64, threshold: f64) -> Class {
    if hi < threshold {
        Class::Low
    } else if lo > threshold {
        Class::High
    } else {
        Class::Average
    }
}

/// Per-draw values of one functional, `values[h][s]`. Rows of hospitals
/// where the functional is undefined are empty.
#[derive(Debug, Clone)]
pub struct FunctionalDraws {
    pub functional: Functional,
    pub values: Vec<Vec<f64>>,
    /// Indices of the draws used.
    pub draws_used: Vec<usize>,
    /// Size of the patient subsample behind `P^DS`, when one was taken.
    pub subsample: Option<usize>,
    pub notes: Vec<String>,
}

/// Evenly spaced draw indices, at most `keep` of `total`.
fn thinned(total: usize, keep: usize) -> Vec<usize> {
    if keep >= total {
        return (0..total).collect();
    }
    (0..keep).map(|i| i * total / keep).collect()
}

fn subsample_patients(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = RngStream::new(seed, 0x4453_5355_4253);
    let mut idx = rand::seq::index::sample(&mut rng, n, size.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Evaluate one functional on every retained draw, respecting the budget.
pub fn functional_draws(
    samples: &PosteriorSamples,
    design: &DesignBundle,
    functional: Functional,
    opts: &StandardizeOptions,
) -> Result<FunctionalDraws> {
    if samples.is_empty() {
        return Err(Error::Invalid("no posterior draws".into()));
    }
    if samples.meta.data_hash != design.data_hash {
        return Err(Error::Mismatch(
            "samples were fit to a different dataset".into(),
        ));
    }
    let spec = &samples.meta.spec;
    if functional == Functional::Is {
        check_mode(spec, opts)?;
    }
    let s = samples.len();
    let h_count = design.n_hospitals();
    let n = design.n();
    let per_draw = (h_count * n) as f64;
    let mut notes = Vec::new();
    let mut subsample = None;
    let mut patients = None;
    let mut draws_used: Vec<usize> = (0..s).collect();
    let exact_double = match functional {
        Functional::P => false,
        Functional::Is => !opts.fast_expected && opts.mode == ExpectedMode::AllHospitals,
        Functional::Ds => !opts.fast_direct,
    };
    if exact_double && s as f64 * per_draw > opts.budget {
        if functional == Functional::Ds && n > opts.subsample {
            let idx = subsample_patients(n, opts.subsample, opts.seed);
            notes.push(format!(
                "DS outer sum over a uniform subsample of {} of {n} patients (seed {})",
                idx.len(),
                opts.seed
            ));
            subsample = Some(idx.len());
            patients = Some(idx);
        }
        let cost = (h_count * patients.as_ref().map_or(n, |p: &Vec<usize>| p.len())) as f64;
        let keep = ((opts.budget / cost).floor() as usize).clamp(1, s);
        if keep < s {
            draws_used = thinned(s, keep);
            notes.push(format!(
                "{functional} evaluated on {keep} evenly spaced draws of {s} to respect the S*H*N budget"
            ));
        }
    }
    let ybar = design_ybar(design);
    let per: Vec<Vec<Option<f64>>> = draws_used
        .par_iter()
        .map(|&i| {
            let draw = &samples.draws[i];
            let pred = Predictor::new(design, &draw.beta);
            match functional {
                Functional::P => own_rates(draw, design, &pred),
                Functional::Is => {
                    let e = expected_with(draw, design, &pred, opts);
                    own_rates(draw, design, &pred)
                        .into_iter()
                        .zip(e)
                        .map(|(p, e)| Some(p? / e? * ybar))
                        .collect()
                }
                Functional::Ds => direct_with(draw, &pred, patients.as_deref(), opts.fast_direct)
                    .into_iter()
                    .map(Some)
                    .collect(),
            }
        })
        .collect();
    let mut values = vec![Vec::with_capacity(draws_used.len()); h_count];
    for row in per {
        for (h, v) in row.into_iter().enumerate() {
            if let Some(v) = v {
                values[h].push(v);
            }
        }
    }
    Ok(FunctionalDraws {
        functional,
        values,
        draws_used,
        subsample,
        notes,
    })
}

fn own_rates(draw: &ParamState, design: &DesignBundle, pred: &Predictor<'_>) -> Vec<Option<f64>> {
    (0..design.n_hospitals())
        .map(|h| {
            let rows = design.rows_of(h);
            if rows.is_empty() {
                return None;
            }
            let n = rows.len() as f64;
            Some(
                rows.map(|j| logistic(pred.eta(j, draw.alpha[h], h)))
                    .sum::<f64>()
                    / n,
            )
        })
        .collect()
}

/// Per-hospital posterior intervals of one functional.
pub fn summarize(
    samples: &PosteriorSamples,
    design: &DesignBundle,
    functional: Functional,
    opts: &StandardizeOptions,
) -> Result<Vec<Option<Interval>>> {
    let fd = functional_draws(samples, design, functional, opts)?;
    Ok(fd.values.iter().map(|v| Interval::from_draws(v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub hospital_id: String,
    pub volume: u64,
    pub n: usize,
    /// Observed rate `O_h`; `None` without patients.
    pub raw: Option<f64>,
    pub p: Option<Interval>,
    pub is: Option<Interval>,
    pub ds: Interval,
    pub class: Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub ybar: f64,
    pub threshold: f64,
    /// Functional behind the class labels.
    pub classified_on: Functional,
    pub draws: usize,
    pub notes: Vec<String>,
}

pub const REPORT_HEADER: &str =
    "hospital_id,volume,n,raw,P_mean,P_lo,P_hi,IS_mean,IS_lo,IS_hi,DS_mean,DS_lo,DS_hi,class";

/// Posterior summaries of `P_h`, `P^IS_h` and `P^DS_h` for every hospital,
/// labeled by the `P^DS` interval against `threshold`.
pub fn rate_report(
    samples: &PosteriorSamples,
    dataset: &Dataset,
    design: &DesignBundle,
    opts: &StandardizeOptions,
    threshold: f64,
) -> Result<RateReport> {
    if dataset.content_hash() != design.data_hash {
        return Err(Error::Mismatch("dataset does not match the design".into()));
    }
    let p = functional_draws(samples, design, Functional::P, opts)?;
    let is = functional_draws(samples, design, Functional::Is, opts)?;
    let ds = functional_draws(samples, design, Functional::Ds, opts)?;
    let mut notes = Vec::new();
    notes.extend(is.notes.iter().cloned());
    notes.extend(ds.notes.iter().cloned());
    let rows = dataset
        .hospitals()
        .iter()
        .enumerate()
        .map(|(h, rec)| {
            let ds_i =
                Interval::from_draws(&ds.values[h]).expect("direct rates exist for every hospital");
            RateRow {
                hospital_id: rec.hospital_id.clone(),
                volume: rec.volume,
                n: dataset.n_h(h),
                raw: (dataset.n_h(h) > 0).then(|| dataset.raw_rate(h)),
                p: Interval::from_draws(&p.values[h]),
                is: Interval::from_draws(&is.values[h]),
                ds: ds_i,
                class: classify_interval(ds_i.lo, ds_i.hi, threshold),
            }
        })
        .collect();
    Ok(RateReport {
        rows,
        ybar: dataset.ybar(),
        threshold,
        classified_on: Functional::Ds,
        draws: samples.len(),
        notes,
    })
}

impl RateReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let iv = |i: Option<Interval>| {
                format!(
                    "{},{},{}",
                    opt(i.map(|i| i.mean)),
                    opt(i.map(|i| i.lo)),
                    opt(i.map(|i| i.hi))
                )
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.hospital_id,
                r.volume,
                r.n,
                opt(r.raw),
                iv(r.p),
                iv(r.is),
                iv(Some(r.ds)),
                r.class
            ));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn labels(&self) -> BTreeMap<String, Class> {
        self.rows
            .iter()
            .map(|r| (r.hospital_id.clone(), r.class))
            .collect()
    }

    /// Relabel against another threshold.
    pub fn classify(&self, threshold: f64) -> Vec<Class> {
        classify(
            &self.rows.iter().map(|r| r.ds).collect::<Vec<_>>(),
            threshold,
        )
    }

    /// Volume quartile (1..=4) of each hospital, by rank of volume with
    /// ties broken by row order.
    pub fn volume_quartiles(&self) -> Vec<u8> {
        volume_quartiles(&self.rows.iter().map(|r| r.volume).collect::<Vec<_>>())
    }

    /// Class counts overall and within each volume quartile.
    pub fn class_counts(&self) -> Vec<(String, [usize; 3])> {
        let q = self.volume_quartiles();
        let mut out = vec![("all".to_string(), [0usize; 3])];
        out.extend((1..=4).map(|k| (format!("Q{k}"), [0usize; 3])));
        for (r, &qk) in self.rows.iter().zip(&q) {
            out[0].1[r.class.index()] += 1;
            out[qk as usize].1[r.class.index()] += 1;
        }
        out
    }
}

pub fn classify(intervals: &[Interval], threshold: f64) -> Vec<Class> {
    intervals
        .iter()
        .map(|i| classify_interval(i.lo, i.hi, threshold))
        .collect()
}

pub fn volume_quartiles(volume: &[u64]) -> Vec<u8> {
    let n = volume.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&h| volume[h]);
    let mut q = vec![0u8; n];
    for (rank, &h) in order.iter().enumerate() {
        q[h] = (4 * rank / n.max(1)) as u8 + 1;
    }
    q
}

/// Three-by-three table of labels under two models (rows: first model).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTable {
    pub counts: [[usize; 3]; 3],
}

impl CrossTable {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn percentages(&self) -> [[f64; 3]; 3] {
        let t = self.total().max(1) as f64;
        self.counts.map(|row| row.map(|c| 100.0 * c as f64 / t))
    }

    pub fn off_diagonal(&self) -> usize {
        self.total() - (0..3).map(|i| self.counts[i][i]).sum::<usize>()
    }
}

/// Cross-tabulate two labelings of the same hospitals, optionally restricted
/// to the hospitals in `keep`.
pub fn cross_classify(
    a: &BTreeMap<String, Class>,
    b: &BTreeMap<String, Class>,
    keep: Option<&BTreeSet<String>>,
) -> Result<CrossTable> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Mismatch(
            "labelings cover different hospitals".into(),
        ));
    }
    let mut counts = [[0usize; 3]; 3];
    for (id, ca) in a {
        if keep.is_some_and(|k| !k.contains(id)) {
            continue;
        }
        counts[ca.index()][b[id].index()] += 1;
    }
    Ok(CrossTable { counts })
}

/// Per-draw log-likelihood of `validation` under each retained draw.
pub fn predictive_draw_loglik(
    samples: &PosteriorSamples,
    train_design: &DesignBundle,
    validation: &Dataset,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no posterior draws".into()));
    }
    if samples.meta.data_hash != train_design.data_hash {
        return Err(Error::Mismatch(
            "samples were fit to a different dataset".into(),
        ));
    }
    let val = train_design.apply_to(validation)?;
    Ok(samples
        .draws
        .par_iter()
        .map(|d| {
            let pred = Predictor::new(&val, &d.beta);
            (0..val.n())
                .map(|j| {
                    let h = val.hospital[j];
                    bernoulli_logpmf(val.y[j], pred.eta(j, d.alpha[h], h))
                })
                .sum()
        })
        .collect())
}

/// `log((1/S) sum_s prod_hj Bernoulli(y_hj | p_hj^(s)))`.
pub fn predictive_log_likelihood(
    samples: &PosteriorSamples,
    train_design: &DesignBundle,
    validation: &Dataset,
) -> Result<f64> {
    Ok(log_mean_exp(&predictive_draw_loglik(
        samples,
        train_design,
        validation,
    )?))
}

/// A fitted model: its draws and the training design they belong to.
#[derive(Clone, Copy)]
pub struct FittedModel<'a> {
    pub samples: &'a PosteriorSamples,
    pub design: &'a DesignBundle,
}

/// Log predictive Bayes factor of `m1` over `m2` on `validation`.
pub fn log_predictive_bayes_factor(
    m1: FittedModel<'_>,
    m2: FittedModel<'_>,
    validation: &Dataset,
) -> Result<f64> {
    if m1.samples.meta.data_hash != m2.samples.meta.data_hash {
        return Err(Error::Mismatch(
            "models were fit to different training splits".into(),
        ));
    }
    let l1 = predictive_log_likelihood(m1.samples, m1.design, validation)?;
    let l2 = predictive_log_likelihood(m2.samples, m2.design, validation)?;
    Ok(l1 - l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{HospitalRecord, PatientRecord};
    use crate::design::build_design;
    use crate::gibbs::{hyper_names, Hyper, SampleMeta};
    use crate::model::Preset;

    fn toy(volumes: &[u64], n_per: &[usize]) -> Dataset {
        let mut hospitals = Vec::new();
        let mut patients = Vec::new();
        for (h, (&v, &n)) in volumes.iter().zip(n_per).enumerate() {
            let id = format!("h{h}");
            hospitals.push(HospitalRecord {
                hospital_id: id.clone(),
                volume: v,
                attributes: BTreeMap::new(),
            });
            for j in 0..n {
                let t = (7 * h + 3 * j) as f64;
                patients.push(PatientRecord {
                    patient_id: format!("{h}-{j}"),
                    hospital_id: id.clone(),
                    outcome: (h + 2 * j) % 3 == 0,
                    covariates: vec![(t * 0.61).sin() * 1.5, ((h + j) % 2) as f64],
                    age: 60.0 + (t * 0.37).cos().abs() * 35.0,
                    admit_period: 1,
                });
            }
        }
        Dataset::new(vec!["x1".into(), "x2".into()], hospitals, patients).unwrap()
    }

    fn draw(alpha: Vec<f64>, beta: Vec<f64>) -> ParamState {
        ParamState {
            alpha,
            beta,
            hyper: Hyper {
                theta: vec![-1.5],
                g: vec![1.0],
                sigma2_alpha: 0.1,
                sigma2_beta: 1.0,
                delta: 0.0,
                g_delta: 1.0,
            },
        }
    }

    fn samples_for(
        design: &DesignBundle,
        spec: &ModelSpec,
        draws: Vec<ParamState>,
    ) -> PosteriorSamples {
        let n = draws.len();
        PosteriorSamples {
            meta: SampleMeta {
                iterations: n,
                burnin: 0,
                thin: 1,
                seed: 0,
                n_chains: 1,
                spec: spec.clone(),
                spec_hash: spec.hash(),
                data_hash: design.data_hash.clone(),
                hospital_ids: design.hospitals.hospital_ids.clone(),
                beta_names: design.transform.names.clone(),
                hyper_names: hyper_names(design, spec),
                delta_acceptance: vec![None],
                delta_step: vec![None],
                warnings: vec![],
            },
            draws,
            chain: vec![0; n],
        }
    }

    fn hand_eta(design: &DesignBundle, d: &ParamState, j: usize, h: usize) -> f64 {
        let mut eta = d.alpha[h];
        for c in 0..design.p {
            let x = if Some(c) == design.interaction {
                design
                    .transform
                    .apply(c, design.age[j] * (design.hospitals.volume[h] + 1.0).ln())
            } else {
                design.row(j)[c]
            };
            eta += x * d.beta[c];
        }
        eta
    }

    #[test]
    fn zero_predictor_gives_half() {
        let d = toy(&[10, 20], &[2, 2]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(patient_rate(&st, &b, 0, 1), 0.5);
    }

    #[test]
    fn no_interaction_rate_ignores_attended_hospital() {
        let d = toy(&[10, 20, 30], &[3, 3, 3]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-1.0, 0.2, 0.7], vec![0.4, -0.3]);
        // Give patient 0 (hospital 0) the covariates of patient 3 (hospital 1).
        let mut p = d.patients().to_vec();
        p[0].covariates = p[3].covariates.clone();
        let d2 = d.with_patients(p).unwrap();
        let b2 = b.apply_to(&d2).unwrap();
        for target in 0..3 {
            assert_eq!(
                patient_rate(&st, &b2, 0, target),
                patient_rate(&st, &b, 3, target)
            );
        }
    }

    #[test]
    fn interaction_recomputed_for_target() {
        let d = toy(&[10, 1000], &[4, 4]);
        let mut p = d.patients().to_vec();
        p[0].age = 90.0;
        let d = d.with_patients(p).unwrap();
        let spec = ModelSpec::preset(Preset::SLIL);
        let spec = ModelSpec {
            mean: MeanFamily::Constant,
            ..spec
        };
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-1.2, -0.9], vec![0.3, 0.2, 0.5]);
        for target in 0..2 {
            let want = logistic(hand_eta(&b, &st, 0, target));
            assert!((patient_rate(&st, &b, 0, target) - want).abs() < 1e-14);
            let pred = Predictor::new(&b, &st.beta);
            assert!((logistic(pred.eta(0, st.alpha[target], target)) - want).abs() < 1e-12);
        }
        // Only the interaction differs between the two targets.
        let c = b.interaction.unwrap();
        let z10 = b.transform.apply(c, 90.0 * 11f64.ln());
        let z1000 = b.transform.apply(c, 90.0 * 1001f64.ln());
        let diff = hand_eta(&b, &st, 0, 1) - hand_eta(&b, &st, 0, 0);
        assert!((diff - (st.alpha[1] - st.alpha[0] + 0.5 * (z1000 - z10))).abs() < 1e-12);
    }

    #[test]
    fn hospital_rate_cases() {
        let d = toy(&[5, 5, 5], &[1, 3, 0]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-1.0, 0.5, 0.0], vec![0.8, -0.4]);
        let one = hospital_rate_p(&st, &b, 0).unwrap();
        assert_eq!(one, patient_rate(&st, &b, 0, 0));
        let three = hospital_rate_p(&st, &b, 1).unwrap();
        let hand: f64 = (1..4)
            .map(|j| {
                let r = b.row(j);
                1.0 / (1.0 + (-(0.5 + 0.8 * r[0] - 0.4 * r[1])).exp())
            })
            .sum::<f64>()
            / 3.0;
        assert!((three - hand).abs() < 1e-15);
        assert!(hospital_rate_p(&st, &b, 2).is_err());
    }

    #[test]
    fn identical_patients_share_rate() {
        let d = toy(&[5, 5], &[4, 1]);
        let mut p = d.patients().to_vec();
        for r in p.iter_mut().take(4) {
            r.covariates = vec![0.3, 1.0];
        }
        let d = d.with_patients(p).unwrap();
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.4, 0.1], vec![0.2, 0.6]);
        let pr = patient_rate(&st, &b, 0, 0);
        assert!((hospital_rate_p(&st, &b, 0).unwrap() - pr).abs() < 1e-15);
    }

    #[test]
    fn single_hospital_expected_equals_own_rate() {
        let d = toy(&[50], &[6]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.7], vec![0.5, 0.3]);
        let opts = StandardizeOptions::default();
        let e = expected_rate_e(&st, &b, &spec, 0, &opts).unwrap();
        assert!((e - hospital_rate_p(&st, &b, 0).unwrap()).abs() < 1e-15);
        let is = indirect_standardized(&st, &b, &spec, 0, &opts).unwrap();
        assert!((is - design_ybar(&b)).abs() < 1e-15);
    }

    #[test]
    fn equal_effects_expected_rate() {
        let d = toy(&[5, 9, 14], &[3, 4, 2]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.3; 3], vec![0.5, 0.3]);
        let opts = StandardizeOptions::default();
        for h in 0..3 {
            let want: f64 = b
                .rows_of(h)
                .map(|j| logistic(-0.3 + dot(b.row(j), &st.beta)))
                .sum::<f64>()
                / b.n_h(h) as f64;
            let e = expected_rate_e(&st, &b, &spec, h, &opts).unwrap();
            assert!((e - want).abs() < 1e-15);
        }
    }

    #[test]
    fn two_hospital_indirect_by_hand() {
        let d = toy(&[5, 9], &[2, 1]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-1.0, 0.5], vec![0.5, 0.3]);
        let xb: Vec<f64> = (0..3).map(|j| dot(b.row(j), &st.beta)).collect();
        let p0 = (logistic(-1.0 + xb[0]) + logistic(-1.0 + xb[1])) / 2.0;
        let e0 = ((logistic(-1.0 + xb[0]) + logistic(0.5 + xb[0])) / 2.0
            + (logistic(-1.0 + xb[1]) + logistic(0.5 + xb[1])) / 2.0)
            / 2.0;
        let ybar = design_ybar(&b);
        let got = indirect_standardized(&st, &b, &spec, 0, &StandardizeOptions::default()).unwrap();
        assert!((got - p0 / e0 * ybar).abs() < 1e-15);
    }

    #[test]
    fn hc_mean_needs_constant_family() {
        let d = toy(&[5, 9, 30], &[2, 2, 2]);
        let opts = StandardizeOptions {
            mode: ExpectedMode::HcMean,
            ..Default::default()
        };
        let lc = ModelSpec::preset(Preset::LC);
        let b = build_design(&d, &lc).unwrap();
        let st = draw(vec![0.0; 3], vec![0.1, 0.1]);
        assert!(expected_rate_e(&st, &b, &lc, 0, &opts).is_err());
        let cc = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &cc).unwrap();
        let e = expected_rate_e(&st, &b, &cc, 0, &opts).unwrap();
        let want = b
            .rows_of(0)
            .map(|j| logistic(-1.5 + dot(b.row(j), &st.beta)))
            .sum::<f64>()
            / 2.0;
        assert!((e - want).abs() < 1e-15);
    }

    #[test]
    fn single_patient_direct_rate() {
        let d = toy(&[5, 9], &[1, 0]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-1.0, 0.4], vec![0.2, 0.3]);
        for h in 0..2 {
            assert_eq!(direct_standardized(&st, &b, h), patient_rate(&st, &b, 0, h));
        }
    }

    #[test]
    fn equal_effects_equal_direct_rates() {
        let d = toy(&[5, 900], &[3, 4]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.8, -0.8], vec![0.2, 0.3]);
        assert_eq!(
            direct_standardized(&st, &b, 0),
            direct_standardized(&st, &b, 1)
        );
    }

    #[test]
    fn vectorized_paths_match_scalar_ops() {
        let d = toy(&[5, 40, 300, 7], &[3, 5, 0, 4]);
        for preset in [Preset::CC, Preset::SLIL] {
            let spec = match preset {
                Preset::SLIL => ModelSpec {
                    mean: MeanFamily::Constant,
                    ..ModelSpec::preset(Preset::SLIL)
                },
                _ => ModelSpec::preset(preset),
            };
            let b = build_design(&d, &spec).unwrap();
            let beta: Vec<f64> = (0..b.p).map(|c| 0.3 - 0.2 * c as f64).collect();
            let draws = vec![
                draw(vec![-1.0, -0.5, 0.1, -2.0], beta.clone()),
                draw(vec![-0.2, -1.5, 0.3, -1.0], beta),
            ];
            let s = samples_for(&b, &spec, draws.clone());
            let opts = StandardizeOptions::default();
            let fp = functional_draws(&s, &b, Functional::P, &opts).unwrap();
            let fi = functional_draws(&s, &b, Functional::Is, &opts).unwrap();
            let fd = functional_draws(&s, &b, Functional::Ds, &opts).unwrap();
            assert!(fp.values[2].is_empty() && fi.values[2].is_empty());
            for (k, st) in draws.iter().enumerate() {
                for h in 0..4 {
                    if b.n_h(h) > 0 {
                        let p = hospital_rate_p(st, &b, h).unwrap();
                        let is = indirect_standardized(st, &b, &spec, h, &opts).unwrap();
                        assert!((fp.values[h][k] - p).abs() < 1e-14);
                        assert!((fi.values[h][k] - is).abs() < 1e-14);
                    }
                    assert!((fd.values[h][k] - direct_standardized(st, &b, h)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn quantile_rule_example() {
        let i = Interval::from_draws(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((i.mean - 0.25).abs() < 1e-15);
        assert!((i.lo - 0.1075).abs() < 1e-12);
        assert!((i.hi - 0.3925).abs() < 1e-12);
        let c = Interval::from_draws(&[0.2; 7]).unwrap();
        assert_eq!((c.lo, c.mean, c.hi), (0.2, 0.2, 0.2));
        assert!(Interval::from_draws(&[]).is_none());
    }

    #[test]
    fn classification_examples() {
        assert_eq!(classify_interval(0.10, 0.14, 0.15), Class::Low);
        assert_eq!(classify_interval(0.14, 0.16, 0.15), Class::Average);
        assert_eq!(classify_interval(0.151, 0.22, 0.15), Class::High);
    }

    #[test]
    fn cross_classify_cases() {
        let ids = ["a", "b", "c", "d"];
        let la: BTreeMap<String, Class> = ids
            .iter()
            .zip([Class::Low, Class::Average, Class::High, Class::Average])
            .map(|(i, c)| (i.to_string(), c))
            .collect();
        let t = cross_classify(&la, &la, None).unwrap();
        assert_eq!(t.counts, [[1, 0, 0], [0, 2, 0], [0, 0, 1]]);
        assert_eq!(t.off_diagonal(), 0);
        let mut lb = la.clone();
        lb.insert("d".into(), Class::High);
        let keep: BTreeSet<String> = ["b", "d"].iter().map(|s| s.to_string()).collect();
        let t = cross_classify(&la, &lb, Some(&keep)).unwrap();
        assert_eq!(t.counts, [[0, 0, 0], [0, 1, 1], [0, 0, 0]]);
        assert!((t.percentages()[1][2] - 50.0).abs() < 1e-12);
        let other: BTreeMap<String, Class> = [("x".to_string(), Class::Low)].into_iter().collect();
        assert!(cross_classify(&la, &other, None).is_err());
    }

    #[test]
    fn quartiles_partition() {
        let q = volume_quartiles(&[5, 1, 9, 3, 7, 2, 8, 4]);
        assert_eq!(q, vec![3, 1, 4, 2, 3, 1, 4, 2]);
    }

    #[test]
    fn log_mean_exp_example() {
        let got = log_mean_exp(&[-100.0, -102.0]);
        let want = -100.0 + ((1.0 + (-2f64).exp()) / 2.0).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn predictive_likelihood_at_half() {
        let d = toy(&[5, 9], &[3, 4]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![0.0, 0.0], vec![0.0, 0.0]);
        let s = samples_for(&b, &spec, vec![st.clone(), st]);
        let l = predictive_log_likelihood(&s, &b, &d).unwrap();
        assert!((l - 7.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_draw_is_plug_in() {
        let d = toy(&[5, 9], &[3, 4]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.4, 0.3], vec![0.6, -0.2]);
        let s = samples_for(&b, &spec, vec![st.clone()]);
        let want: f64 = (0..b.n())
            .map(|j| {
                let p = patient_rate(&st, &b, j, b.hospital[j]);
                if b.y[j] {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum();
        let got = predictive_log_likelihood(&s, &b, &d).unwrap();
        assert!((got - want).abs() < 1e-12);
        let m = FittedModel {
            samples: &s,
            design: &b,
        };
        assert_eq!(log_predictive_bayes_factor(m, m, &d).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_training_hashes_rejected() {
        let d = toy(&[5, 9], &[3, 4]);
        let d2 = toy(&[5, 9], &[3, 5]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let b2 = build_design(&d2, &spec).unwrap();
        let st = draw(vec![-0.4, 0.3], vec![0.6, -0.2]);
        let s = samples_for(&b, &spec, vec![st.clone()]);
        let s2 = samples_for(&b2, &spec, vec![st]);
        let r = log_predictive_bayes_factor(
            FittedModel {
                samples: &s,
                design: &b,
            },
            FittedModel {
                samples: &s2,
                design: &b2,
            },
            &d,
        );
        assert!(matches!(r, Err(Error::Mismatch(_))));
    }

    #[test]
    fn budget_guard_subsamples_direct_sum() {
        let d = toy(&[5, 9, 12], &[30, 40, 50]);
        let spec = ModelSpec::preset(Preset::CC);
        let b = build_design(&d, &spec).unwrap();
        let st = draw(vec![-0.4, 0.3, -1.0], vec![0.6, -0.2]);
        let s = samples_for(&b, &spec, vec![st.clone(); 4]);
        let opts = StandardizeOptions {
            budget: 100.0,
            subsample: 25,
            seed: 3,
            ..Default::default()
        };
        let fd = functional_draws(&s, &b, Functional::Ds, &opts).unwrap();
        assert_eq!(fd.subsample, Some(25));
        assert_eq!(fd.draws_used.len(), 1);
        assert_eq!(fd.notes.len(), 2);
        let again = functional_draws(&s, &b, Functional::Ds, &opts).unwrap();
        assert_eq!(fd.values, again.values);
    }
}
