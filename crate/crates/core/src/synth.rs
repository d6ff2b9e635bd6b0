//! Synthetic grouped-outcome data with known ground truth.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, HospitalRecord, PatientRecord};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::logistic;

/// True random-effect mean as a function of `lv = log(vol + 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrueMean {
    Constant {
        mu: f64,
    },
    Linear {
        gamma0: f64,
        gamma1: f64,
    },
    /// `base + amplitude / (1 + exp((lv - center) / width))`: elevated at
    /// small volumes, flat at large ones.
    Elevated {
        base: f64,
        amplitude: f64,
        center: f64,
        width: f64,
    },
}

impl TrueMean {
    pub fn at(&self, lv: f64) -> f64 {
        match *self {
            TrueMean::Constant { mu } => mu,
            TrueMean::Linear { gamma0, gamma1 } => gamma0 + gamma1 * lv,
            TrueMean::Elevated {
                base,
                amplitude,
                center,
                width,
            } => base + amplitude * logistic(-(lv - center) / width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TrueVariance {
    Constant {
        sigma2: f64,
    },
    /// `exp(delta * vol) * sigma2`, volume in raw counts.
    LogLinearVolume {
        sigma2: f64,
        delta: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_hospitals: usize,
    /// Volumes are `round(exp(N(volume_log_mean, volume_log_sd^2)))`, at least 1.
    pub volume_log_mean: f64,
    pub volume_log_sd: f64,
    /// `n_h = max(1, round(volume * patient_fraction))`.
    pub patient_fraction: f64,
    /// Independent standard normal covariates.
    pub n_normal: usize,
    /// One binary covariate per prevalence.
    pub binary_prevalence: Vec<f64>,
    /// Coefficients for the normal then the binary covariates.
    pub beta: Vec<f64>,
    pub age_mean: f64,
    pub age_sd: f64,
    /// Coefficient on `z_age * (lv - mean lv)`, with `z_age` the standardized age.
    pub beta_interaction: f64,
    /// Covariate shift per unit of `-(lv - mean lv)`: positive values make
    /// patients at small hospitals sicker (higher `x' beta` direction).
    pub confounding: f64,
    pub mean: TrueMean,
    pub variance: TrueVariance,
    /// Additive effects on `alpha_h` of standardized attributes
    /// (`ntbr`, `rtbr`, `pci`).
    pub attribute_effects: Vec<(String, f64)>,
    /// Admission periods are uniform on `1..=n_periods`.
    pub n_periods: i64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_hospitals: 300,
            volume_log_mean: 79f64.ln(),
            volume_log_sd: 0.9,
            patient_fraction: 1.0,
            n_normal: 3,
            binary_prevalence: vec![0.3, 0.15],
            beta: vec![0.5, -0.3, 0.2, 0.4, 0.3],
            age_mean: 78.0,
            age_sd: 8.0,
            beta_interaction: 0.0,
            confounding: 0.0,
            mean: TrueMean::Elevated {
                base: -2.1,
                amplitude: 0.6,
                center: 3.5,
                width: 0.5,
            },
            variance: TrueVariance::Constant { sigma2: 0.1 },
            attribute_effects: Vec::new(),
            n_periods: 5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn n_covariates(&self) -> usize {
        self.n_normal + self.binary_prevalence.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hospitals == 0 {
            return Err(Error::Invalid(
                "generator needs at least one hospital".into(),
            ));
        }
        if self.beta.len() != self.n_covariates() {
            return Err(Error::Invalid(format!(
                "generator beta has length {}, expected {}",
                self.beta.len(),
                self.n_covariates()
            )));
        }
        if self
            .binary_prevalence
            .iter()
            .any(|p| !(*p > 0.0 && *p < 1.0))
        {
            return Err(Error::Invalid("prevalences must lie in (0, 1)".into()));
        }
        let s2 = match self.variance {
            TrueVariance::Constant { sigma2 } | TrueVariance::LogLinearVolume { sigma2, .. } => {
                sigma2
            }
        };
        if !(s2 >= 0.0) || !(self.volume_log_sd >= 0.0) || !(self.age_sd > 0.0) {
            return Err(Error::Invalid(
                "generator variances must be nonnegative".into(),
            ));
        }
        if !(self.patient_fraction > 0.0) || self.n_periods < 1 {
            return Err(Error::Invalid(
                "patient_fraction and n_periods must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Realized latent quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `mu_h(z)` per hospital.
    pub mean: Vec<f64>,
    /// `sigma2_h(z)` per hospital.
    pub variance: Vec<f64>,
    /// True success probability of every patient, aligned with the dataset.
    pub p: Vec<f64>,
}

fn normal(rng: &mut RngStream) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw a dataset and its ground truth.
pub fn generate(cfg: &GeneratorConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, 0x5359_4e54);
    let h_count = cfg.n_hospitals;

    let volume: Vec<u64> = (0..h_count)
        .map(|_| {
            let v = (cfg.volume_log_mean + cfg.volume_log_sd * normal(&mut rng))
                .exp()
                .round();
            v.max(1.0) as u64
        })
        .collect();
    let lv: Vec<f64> = volume.iter().map(|v| (*v as f64).ln_1p()).collect();
    let lv_mean = lv.iter().sum::<f64>() / h_count as f64;

    let mut hospitals = Vec::with_capacity(h_count);
    let mut raw_attr: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (h, &vol) in volume.iter().enumerate() {
        let ntbr = (0.5 * normal(&mut rng)).exp();
        let rtbr = 0.5 + rng.random::<f64>();
        let pci = rng.random::<f64>() < logistic(lv[h] - lv_mean + 0.5);
        let beds = (4.0 + 0.8 * lv[h] + 0.3 * normal(&mut rng)).exp().round();
        raw_attr.entry("ntbr").or_default().push(ntbr);
        raw_attr.entry("rtbr").or_default().push(rtbr);
        raw_attr
            .entry("pci")
            .or_default()
            .push(f64::from(u8::from(pci)));
        let mut attributes = BTreeMap::new();
        attributes.insert("ntbr".to_string(), Some(ntbr));
        attributes.insert("rtbr".to_string(), Some(rtbr));
        attributes.insert("pci".to_string(), Some(f64::from(u8::from(pci))));
        attributes.insert("beds".to_string(), Some(beds));
        hospitals.push(HospitalRecord {
            hospital_id: format!("H{:04}", h + 1),
            volume: vol,
            attributes,
        });
    }

    let mut mean: Vec<f64> = lv.iter().map(|&x| cfg.mean.at(x)).collect();
    for (name, effect) in &cfg.attribute_effects {
        let col = raw_attr
            .get(name.as_str())
            .ok_or_else(|| Error::Invalid(format!("unknown generator attribute `{name}`")))?;
        let m = col.iter().sum::<f64>() / h_count as f64;
        let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / h_count as f64).sqrt();
        for (h, v) in col.iter().enumerate() {
            let z = if sd > 0.0 { (v - m) / sd } else { 0.0 };
            mean[h] += effect * z;
        }
    }
    let variance: Vec<f64> = volume
        .iter()
        .map(|&v| match cfg.variance {
            TrueVariance::Constant { sigma2 } => sigma2,
            TrueVariance::LogLinearVolume { sigma2, delta } => (delta * v as f64).exp() * sigma2,
        })
        .collect();
    let alpha: Vec<f64> = (0..h_count)
        .map(|h| mean[h] + variance[h].sqrt() * normal(&mut rng))
        .collect();

    let d = cfg.n_covariates();
    let mut patients = Vec::new();
    let mut p = Vec::new();
    for h in 0..h_count {
        let n_h = ((volume[h] as f64 * cfg.patient_fraction).round() as usize).max(1);
        let shift = -cfg.confounding * (lv[h] - lv_mean);
        for j in 0..n_h {
            let mut x = Vec::with_capacity(d);
            for k in 0..cfg.n_normal {
                // Shift along the sign of the coefficient so "sicker" raises risk.
                let s = cfg.beta[k].signum() * shift;
                x.push(normal(&mut rng) + s);
            }
            for (b, &prev) in cfg.binary_prevalence.iter().enumerate() {
                let k = cfg.n_normal + b;
                let pr = logistic(crate::stats::logit(prev) + cfg.beta[k].signum() * shift);
                x.push(f64::from(u8::from(rng.random::<f64>() < pr)));
            }
            let z_age = normal(&mut rng) + shift;
            let age = (cfg.age_mean + cfg.age_sd * z_age).max(18.0);
            let mut eta = alpha[h];
            for (xk, bk) in x.iter().zip(&cfg.beta) {
                eta += xk * bk;
            }
            eta += cfg.beta_interaction * (age - cfg.age_mean) / cfg.age_sd * (lv[h] - lv_mean);
            let prob = logistic(eta);
            let outcome = rng.random::<f64>() < prob;
            let admit_period = rng.random_range(1..=cfg.n_periods);
            patients.push(PatientRecord {
                patient_id: format!("P{:04}-{:05}", h + 1, j + 1),
                hospital_id: hospitals[h].hospital_id.clone(),
                outcome,
                covariates: x,
                age,
                admit_period,
            });
            p.push(prob);
        }
    }
    let names = (1..=d).map(|k| format!("x{k}")).collect();
    let dataset = Dataset::new(names, hospitals, patients)?;
    Ok((
        dataset,
        GroundTruth {
            alpha,
            beta: cfg.beta.clone(),
            mean,
            variance,
            p,
        },
    ))
}
