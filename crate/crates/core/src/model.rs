//! Model families, presets and priors.
//!
//! A hospital effect follows `alpha_h ~ N(mu_h(z), sigma2_h(z))`. The mean is
//! always linear in a coefficient vector `theta` over a per-hospital design
//! row `w_h`:
//!
//! | family          | `w_h`                         | `theta`          |
//! |-----------------|-------------------------------|------------------|
//! | constant        | `(1)`                         | `mu_alpha`       |
//! | linear          | `(1, a_h)`                    | `gamma0, gamma1` |
//! | spline          | `b_h`                         | `gamma_s`        |
//! | spline_linear   | `(b_h, standardized z_h)`     | `gamma_s, gamma_l` |
//!
//! where `a_h` defaults to `log(vol_h + 1)` and `b_h` is the B-spline basis
//! row at `log(vol_h + 1)`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::HospitalRecord;
use crate::error::{Error, Result};
use crate::hash::sha256_hex;

/// Pseudo-attribute naming `log(volume + 1)`.
pub const LOG_VOLUME: &str = "log_volume";

fn default_linear_attribute() -> String {
    LOG_VOLUME.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanFamily {
    Constant,
    #[serde(rename = "linear")]
    LinearAttr {
        #[serde(default = "default_linear_attribute")]
        attribute: String,
    },
    #[serde(rename = "spline")]
    SplineVolume,
    SplineLinear {
        attributes: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceFamily {
    Constant,
    /// `exp(delta * vol_h) * sigma2_alpha`, volume in raw counts.
    LogLinearVolume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplineConfig {
    #[serde(default = "default_degree")]
    pub degree: usize,
    /// Interior knots.
    #[serde(default = "default_knots")]
    pub knots: usize,
    /// Diagonal added to the difference penalty; `None` picks
    /// `1e-6 * trace(D'D) / k`.
    #[serde(default)]
    pub ridge: Option<f64>,
}

fn default_degree() -> usize {
    3
}

fn default_knots() -> usize {
    17
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            knots: 17,
            ridge: None,
        }
    }
}

/// Inverse gamma with density proportional to `x^(-shape-1) exp(-scale/x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvGamma {
    pub shape: f64,
    pub scale: f64,
}

impl InvGamma {
    pub const fn new(shape: f64, scale: f64) -> Self {
        Self { shape, scale }
    }
}

impl Default for InvGamma {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub sigma2_beta: InvGamma,
    pub g: InvGamma,
    pub sigma2_alpha: InvGamma,
    pub g_s: InvGamma,
    pub g_l: InvGamma,
    pub g_delta: InvGamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    CC,
    LC,
    SL,
    SLIL,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CC" => Ok(Preset::CC),
            "LC" => Ok(Preset::LC),
            "SL" => Ok(Preset::SL),
            "SLIL" => Ok(Preset::SLIL),
            _ => Err(Error::Invalid(format!("unknown model preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mean: MeanFamily,
    pub variance: VarianceFamily,
    /// Adds `age * log(vol + 1)` as a patient covariate.
    pub interaction: bool,
    pub spline: SplineConfig,
    pub priors: Priors,
}

impl ModelSpec {
    pub fn preset(p: Preset) -> Self {
        let (mean, variance, interaction) = match p {
            Preset::CC => (MeanFamily::Constant, VarianceFamily::Constant, false),
            Preset::LC => (
                MeanFamily::LinearAttr {
                    attribute: LOG_VOLUME.into(),
                },
                VarianceFamily::Constant,
                false,
            ),
            Preset::SL => (
                MeanFamily::SplineVolume,
                VarianceFamily::LogLinearVolume,
                false,
            ),
            Preset::SLIL => (
                MeanFamily::SplineLinear {
                    attributes: vec!["ntbr".into(), "rtbr".into(), "pci".into()],
                },
                VarianceFamily::LogLinearVolume,
                true,
            ),
        };
        Self {
            mean,
            variance,
            interaction,
            spline: SplineConfig::default(),
            priors: Priors::default(),
        }
    }

    /// Parse a model configuration document: either `{"preset": "SLIL"}`
    /// (optionally with `spline`/`priors` overrides) or an explicit
    /// `{"mean": .., "variance": .., "interaction": ..}` form.
    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            preset: Option<String>,
            mean: Option<MeanFamily>,
            variance: Option<VarianceFamily>,
            interaction: Option<bool>,
            spline: Option<SplineConfig>,
            priors: Option<Priors>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        let mut spec = match raw.preset {
            Some(p) => {
                if raw.mean.is_some() || raw.variance.is_some() || raw.interaction.is_some() {
                    return Err(Error::Invalid(
                        "a preset cannot be combined with explicit mean/variance/interaction"
                            .into(),
                    ));
                }
                ModelSpec::preset(p.parse()?)
            }
            None => ModelSpec {
                mean: raw.mean.ok_or_else(|| {
                    Error::Invalid("model config needs `preset` or `mean`".into())
                })?,
                variance: raw.variance.unwrap_or(VarianceFamily::Constant),
                interaction: raw.interaction.unwrap_or(false),
                spline: SplineConfig::default(),
                priors: Priors::default(),
            },
        };
        if let Some(s) = raw.spline {
            spec.spline = s;
        }
        if let Some(p) = raw.priors {
            spec.priors = p;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.priors;
        for (name, ig) in [
            ("sigma2_beta", p.sigma2_beta),
            ("g", p.g),
            ("sigma2_alpha", p.sigma2_alpha),
            ("g_s", p.g_s),
            ("g_l", p.g_l),
            ("g_delta", p.g_delta),
        ] {
            if !(ig.shape > 0.0 && ig.scale > 0.0 && ig.shape.is_finite() && ig.scale.is_finite()) {
                return Err(Error::Invalid(format!(
                    "prior {name} needs positive finite shape and scale"
                )));
            }
        }
        if let MeanFamily::SplineLinear { attributes } = &self.mean {
            if attributes.is_empty() {
                return Err(Error::Invalid(
                    "spline_linear needs at least one linear attribute".into(),
                ));
            }
            if attributes.iter().any(|a| a == LOG_VOLUME || a == "volume") {
                return Err(Error::Invalid(
                    "spline_linear attributes must exclude the spline variable".into(),
                ));
            }
        }
        if self.uses_spline() {
            if let Some(r) = self.spline.ridge {
                if !(r >= 0.0) {
                    return Err(Error::Invalid("spline ridge must be nonnegative".into()));
                }
            }
            if self.spline.degree + 1 + self.spline.knots < 3 {
                return Err(Error::Invalid(
                    "spline basis must have dimension >= 3".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn uses_spline(&self) -> bool {
        matches!(
            self.mean,
            MeanFamily::SplineVolume | MeanFamily::SplineLinear { .. }
        )
    }

    pub fn has_delta(&self) -> bool {
        self.variance == VarianceFamily::LogLinearVolume
    }

    /// Hospital attributes the mean family reads.
    pub fn required_attributes(&self) -> Vec<String> {
        match &self.mean {
            MeanFamily::LinearAttr { attribute } if attribute != LOG_VOLUME => {
                vec![attribute.clone()]
            }
            MeanFamily::SplineLinear { attributes } => attributes.clone(),
            _ => Vec::new(),
        }
    }

    /// Canonical JSON used for hashing and persistence.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    /// Short label such as `CC` when this model equals a preset.
    pub fn label(&self) -> String {
        for p in [Preset::CC, Preset::LC, Preset::SL, Preset::SLIL] {
            let mut q = ModelSpec::preset(p);
            q.spline = self.spline;
            q.priors = self.priors;
            if &q == self {
                return format!("{p:?}");
            }
        }
        "custom".into()
    }
}

/// Centering and scaling applied to linear hospital attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeScaling {
    pub names: Vec<String>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AttributeScaling {
    pub fn identity(names: &[String]) -> Self {
        Self {
            names: names.to_vec(),
            center: vec![0.0; names.len()],
            scale: vec![1.0; names.len()],
        }
    }
}

fn attribute_value(hospital: &HospitalRecord, name: &str) -> Result<f64> {
    if name == LOG_VOLUME {
        return Ok(hospital.log_volume());
    }
    hospital
        .attribute(name)
        .ok_or_else(|| Error::MissingAttribute {
            name: name.to_string(),
            hospital: Some(hospital.hospital_id.clone()),
        })
}

/// Design row `w_h` so that `mu_h = w_h . theta`.
pub fn mean_row(
    mean: &MeanFamily,
    hospital: &HospitalRecord,
    basis_row: &[f64],
    scaling: &AttributeScaling,
) -> Result<Vec<f64>> {
    Ok(match mean {
        MeanFamily::Constant => vec![1.0],
        MeanFamily::LinearAttr { attribute } => vec![1.0, attribute_value(hospital, attribute)?],
        MeanFamily::SplineVolume => basis_row.to_vec(),
        MeanFamily::SplineLinear { attributes } => {
            let mut row = basis_row.to_vec();
            for (i, a) in attributes.iter().enumerate() {
                let raw = attribute_value(hospital, a)?;
                row.push((raw - scaling.center[i]) / scaling.scale[i]);
            }
            row
        }
    })
}

/// Random-effect mean for one hospital at coefficients `theta`.
pub fn mu_h(
    mean: &MeanFamily,
    theta: &[f64],
    hospital: &HospitalRecord,
    basis_row: &[f64],
    scaling: &AttributeScaling,
) -> Result<f64> {
    let row = mean_row(mean, hospital, basis_row, scaling)?;
    if row.len() != theta.len() {
        return Err(Error::Invalid(format!(
            "mean coefficients have length {}, design row {}",
            theta.len(),
            row.len()
        )));
    }
    Ok(row.iter().zip(theta).map(|(w, t)| w * t).sum())
}

/// Random-effect variance for a hospital of the given raw volume.
pub fn sigma2_h(variance: VarianceFamily, sigma2_alpha: f64, delta: f64, volume: f64) -> f64 {
    match variance {
        VarianceFamily::Constant => sigma2_alpha,
        VarianceFamily::LogLinearVolume => (delta * volume).exp() * sigma2_alpha,
    }
}
