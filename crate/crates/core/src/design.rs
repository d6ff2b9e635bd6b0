//! Numeric design matrices built from a dataset and a model spec.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mean_row, AttributeScaling, MeanFamily, ModelSpec};
use crate::spline::{build_basis, build_penalty, default_ridge, SplineBasis};

/// Name of the generated age by log-volume covariate.
pub const INTERACTION_NAME: &str = "age_x_log_volume";

/// Per-column centering and scaling of the patient design.
///
/// Columns whose values are all 0 or 1 are left raw (center 0, scale 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub binary: Vec<bool>,
}

impl ColumnTransform {
    #[inline]
    pub fn apply(&self, j: usize, raw: f64) -> f64 {
        (raw - self.center[j]) / self.scale[j]
    }

    #[inline]
    pub fn invert(&self, j: usize, z: f64) -> f64 {
        z * self.scale[j] + self.center[j]
    }

    /// Coefficients on the raw covariate scale (slopes only).
    pub fn raw_coefficients(&self, beta: &[f64]) -> Vec<f64> {
        beta.iter().zip(&self.scale).map(|(b, s)| b / s).collect()
    }

    /// Fit centers and scales from raw columns.
    fn fit(names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        let mut center = Vec::with_capacity(columns.len());
        let mut scale = Vec::with_capacity(columns.len());
        let mut binary = Vec::with_capacity(columns.len());
        for (name, col) in names.iter().zip(columns) {
            if col.iter().all(|&v| v == 0.0 || v == 1.0) {
                center.push(0.0);
                scale.push(1.0);
                binary.push(true);
                continue;
            }
            let (m, sd) = population_moments(col);
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::ZeroVariance(name.clone()));
            }
            center.push(m);
            scale.push(sd);
            binary.push(false);
        }
        Ok(Self {
            names,
            center,
            scale,
            binary,
        })
    }
}

/// Mean and standard deviation with the `1/n` denominator.
fn population_moments(col: &[f64]) -> (f64, f64) {
    let n = col.len() as f64;
    let m = col.iter().sum::<f64>() / n;
    let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// One prior block of the mean coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefBlock {
    /// Column-name stem, e.g. `gamma_s`.
    pub name: String,
    pub coef_names: Vec<String>,
    /// Name of the block's prior scale parameter (`g`, `g_s`, `g_l`).
    pub scale_name: &'static str,
    pub range: Range<usize>,
    /// Prior precision shape; `None` is the identity.
    pub penalty: Option<DMatrix<f64>>,
}

impl CoefBlock {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    /// `theta_b' P_b theta_b`.
    pub fn quadratic(&self, theta: &[f64]) -> f64 {
        let t = &theta[self.range.clone()];
        match &self.penalty {
            None => t.iter().map(|x| x * x).sum(),
            Some(p) => {
                let mut s = 0.0;
                for i in 0..t.len() {
                    for j in 0..t.len() {
                        s += t[i] * p[(i, j)] * t[j];
                    }
                }
                s
            }
        }
    }
}

/// Hospital-level quantities: mean design rows, prior blocks, volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct HospitalDesign {
    pub hospital_ids: Vec<String>,
    /// `H x q`, row `h` is `w_h`.
    pub w: DMatrix<f64>,
    pub blocks: Vec<CoefBlock>,
    pub volume: Vec<f64>,
    /// `log(vol + 1)`.
    pub log_volume: Vec<f64>,
    pub basis: Option<SplineBasis>,
    pub scaling: AttributeScaling,
}

impl HospitalDesign {
    pub fn n_hospitals(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_coef(&self) -> usize {
        self.w.ncols()
    }

    #[inline]
    pub fn mean(&self, h: usize, theta: &[f64]) -> f64 {
        let mut s = 0.0;
        for (k, t) in theta.iter().enumerate() {
            s += self.w[(h, k)] * t;
        }
        s
    }

    pub fn coef_names(&self) -> Vec<String> {
        self.blocks
            .iter()
            .flat_map(|b| b.coef_names.iter().cloned())
            .collect()
    }

    fn build(d: &Dataset, spec: &ModelSpec) -> Result<Self> {
        let hs = d.hospitals();
        let h_count = hs.len();
        let volume: Vec<f64> = hs.iter().map(|h| h.volume as f64).collect();
        let log_volume: Vec<f64> = hs.iter().map(|h| h.log_volume()).collect();

        for name in spec.required_attributes() {
            if !d.attribute_names().contains(&name) {
                return Err(Error::MissingAttribute {
                    name,
                    hospital: None,
                });
            }
        }

        let (basis, bmat) = if spec.uses_spline() {
            let (b, m) = build_basis(&log_volume, spec.spline.degree, spec.spline.knots)?;
            (Some(b), Some(m))
        } else {
            (None, None)
        };

        let scaling = match &spec.mean {
            MeanFamily::SplineLinear { attributes } => {
                let mut columns = Vec::new();
                for a in attributes {
                    let mut col = Vec::with_capacity(h_count);
                    for h in hs {
                        col.push(h.attribute(a).ok_or_else(|| Error::MissingAttribute {
                            name: a.clone(),
                            hospital: Some(h.hospital_id.clone()),
                        })?);
                    }
                    columns.push(col);
                }
                let t = ColumnTransform::fit(attributes.clone(), &columns)?;
                AttributeScaling {
                    names: t.names,
                    center: t.center,
                    scale: t.scale,
                }
            }
            _ => AttributeScaling::identity(&[]),
        };

        let k_spline = basis.as_ref().map_or(0, |b| b.dim());
        let blocks = match &spec.mean {
            MeanFamily::Constant => vec![identity_block(
                "mu_alpha",
                vec!["mu_alpha".into()],
                "g",
                0..1,
            )],
            MeanFamily::LinearAttr { .. } => vec![identity_block(
                "gamma",
                vec!["gamma0".into(), "gamma1".into()],
                "g",
                0..2,
            )],
            MeanFamily::SplineVolume => vec![spline_block(k_spline, spec)?],
            MeanFamily::SplineLinear { attributes } => vec![
                spline_block(k_spline, spec)?,
                identity_block(
                    "gamma_l",
                    attributes.iter().map(|a| format!("gamma_l.{a}")).collect(),
                    "g_l",
                    k_spline..k_spline + attributes.len(),
                ),
            ],
        };
        let q = blocks.last().map_or(0, |b| b.range.end);

        let mut w = DMatrix::zeros(h_count, q);
        for (i, h) in hs.iter().enumerate() {
            let brow: Vec<f64> = bmat
                .as_ref()
                .map(|m| m.row(i).iter().copied().collect())
                .unwrap_or_default();
            let row = mean_row(&spec.mean, h, &brow, &scaling)?;
            for (k, v) in row.into_iter().enumerate() {
                w[(i, k)] = v;
            }
        }

        Ok(Self {
            hospital_ids: hs.iter().map(|h| h.hospital_id.clone()).collect(),
            w,
            blocks,
            volume,
            log_volume,
            basis,
            scaling,
        })
    }
}

fn identity_block(
    name: &str,
    coef_names: Vec<String>,
    scale_name: &'static str,
    range: Range<usize>,
) -> CoefBlock {
    CoefBlock {
        name: name.into(),
        coef_names,
        scale_name,
        range,
        penalty: None,
    }
}

fn spline_block(k: usize, spec: &ModelSpec) -> Result<CoefBlock> {
    let ridge = match spec.spline.ridge {
        Some(r) => r,
        None => default_ridge(k)?,
    };
    let p = build_penalty(k, ridge)?;
    Ok(CoefBlock {
        name: "gamma_s".into(),
        coef_names: (1..=k).map(|i| format!("gamma_s.{i}")).collect(),
        scale_name: "g_s",
        range: 0..k,
        penalty: Some(p.matrix),
    })
}

/// Everything the sampler and the rate functionals need, in numeric form.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    /// Standardized patient design, row-major `N x p`.
    pub x: Vec<f64>,
    pub p: usize,
    pub y: Vec<bool>,
    /// Hospital index of each row (the role of the indicator matrix `K`).
    pub hospital: Vec<usize>,
    /// Row ranges per hospital: rows of `h` are `offsets[h]..offsets[h + 1]`.
    pub offsets: Vec<usize>,
    pub transform: ColumnTransform,
    /// Column index of the interaction covariate, if present.
    pub interaction: Option<usize>,
    /// Raw patient ages.
    pub age: Vec<f64>,
    pub hospitals: HospitalDesign,
    pub data_hash: String,
}

impl DesignBundle {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_hospitals(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_h(&self, h: usize) -> usize {
        self.offsets[h + 1] - self.offsets[h]
    }

    pub fn rows_of(&self, h: usize) -> Range<usize> {
        self.offsets[h]..self.offsets[h + 1]
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.x[j * self.p..(j + 1) * self.p]
    }

    /// `X beta`.
    pub fn fixed_effects(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|j| self.row(j).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Standardized interaction value for patient `j` at hospital `h`.
    #[inline]
    pub fn interaction_at(&self, j: usize, h: usize) -> Option<f64> {
        self.interaction.map(|c| {
            self.transform
                .apply(c, self.age[j] * self.hospitals.log_volume[h])
        })
    }

    /// Raw value of design cell `(j, c)`.
    pub fn raw(&self, j: usize, c: usize) -> f64 {
        self.transform.invert(c, self.row(j)[c])
    }

    /// Design for another dataset over the same hospitals, reusing this
    /// bundle's transforms and hospital design.
    pub fn apply_to(&self, d: &Dataset) -> Result<DesignBundle> {
        let ids: Vec<&str> = d
            .hospitals()
            .iter()
            .map(|h| h.hospital_id.as_str())
            .collect();
        if ids.len() != self.hospitals.hospital_ids.len()
            || ids
                .iter()
                .zip(&self.hospitals.hospital_ids)
                .any(|(a, b)| a != b)
        {
            return Err(Error::Mismatch(
                "datasets do not share the hospital list".into(),
            ));
        }
        let covs = d.n_covariates();
        if covs + usize::from(self.interaction.is_some()) != self.p {
            return Err(Error::Mismatch("datasets do not share covariates".into()));
        }
        let (raw, age) = raw_columns(d, self.interaction.is_some(), &self.hospitals.log_volume)?;
        Ok(self.assemble(d, &raw, age, self.transform.clone(), self.hospitals.clone()))
    }

    fn assemble(
        &self,
        d: &Dataset,
        raw: &[Vec<f64>],
        age: Vec<f64>,
        transform: ColumnTransform,
        hospitals: HospitalDesign,
    ) -> DesignBundle {
        assemble(d, raw, age, transform, hospitals, self.interaction)
    }
}

fn assemble(
    d: &Dataset,
    raw: &[Vec<f64>],
    age: Vec<f64>,
    transform: ColumnTransform,
    hospitals: HospitalDesign,
    interaction: Option<usize>,
) -> DesignBundle {
    let n = d.n_patients();
    let p = raw.len();
    let mut x = vec![0.0; n * p];
    for (c, col) in raw.iter().enumerate() {
        for (j, v) in col.iter().enumerate() {
            x[j * p + c] = transform.apply(c, *v);
        }
    }
    let mut offsets = Vec::with_capacity(d.n_hospitals() + 1);
    offsets.push(0);
    for h in 0..d.n_hospitals() {
        offsets.push(d.hospital_patients(h).end);
    }
    DesignBundle {
        x,
        p,
        y: d.patients().iter().map(|r| r.outcome).collect(),
        hospital: d.patient_hospitals().to_vec(),
        offsets,
        transform,
        interaction,
        age,
        hospitals,
        data_hash: d.content_hash(),
    }
}

fn raw_columns(
    d: &Dataset,
    interaction: bool,
    log_volume: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = d.n_patients();
    let mut raw: Vec<Vec<f64>> = (0..d.n_covariates())
        .map(|_| Vec::with_capacity(n))
        .collect();
    let mut age = Vec::with_capacity(n);
    for r in d.patients() {
        for (c, v) in r.covariates.iter().enumerate() {
            raw[c].push(*v);
        }
        age.push(r.age);
    }
    if interaction {
        if let Some((j, _)) = age.iter().enumerate().find(|(_, a)| !(**a > 0.0)) {
            return Err(Error::Invalid(format!(
                "patient {} has nonpositive age, required by the interaction",
                d.patients()[j].patient_id
            )));
        }
        let col = age
            .iter()
            .zip(d.patient_hospitals())
            .map(|(a, &h)| a * log_volume[h])
            .collect();
        raw.push(col);
    }
    Ok((raw, age))
}

/// Build the patient design (standardized) and hospital design for `spec`.
pub fn build_design(d: &Dataset, spec: &ModelSpec) -> Result<DesignBundle> {
    let hospitals = HospitalDesign::build(d, spec)?;
    let (raw, age) = raw_columns(d, spec.interaction, &hospitals.log_volume)?;
    let mut names = d.covariate_names().to_vec();
    if spec.interaction {
        names.push(INTERACTION_NAME.into());
    }
    let transform = ColumnTransform::fit(names, &raw)?;
    let interaction = spec.interaction.then_some(d.n_covariates());
    Ok(assemble(d, &raw, age, transform, hospitals, interaction))
}
