use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hosprate::data::{load_dataset, split_by_period, Dataset};
use hosprate::design::{build_design, DesignBundle};
use hosprate::gibbs::{read_samples, PosteriorSamples};
use hosprate::inference::FittedModel;
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";

/// Inputs of a fit, enough to rebuild its training and held-out data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub patients: PathBuf,
    pub hospitals: PathBuf,
    pub cutoff: Option<i64>,
}

impl RunInfo {
    /// Training data, and the held-out data when a cutoff was used.
    pub fn datasets(&self) -> Result<(Dataset, Option<Dataset>)> {
        let full = load_dataset(&self.patients, &self.hospitals)?;
        Ok(match self.cutoff {
            None => (full, None),
            Some(c) => {
                let split = split_by_period(&full, c)?;
                (split.train, Some(split.validation))
            }
        })
    }
}

/// A fit directory loaded back into memory.
pub struct LoadedFit {
    pub dir: PathBuf,
    pub info: RunInfo,
    pub samples: PosteriorSamples,
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub design: DesignBundle,
}

impl LoadedFit {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("missing fit artifact {}", path.display()))?;
        let info: RunInfo =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let samples =
            read_samples(dir).with_context(|| format!("reading samples in {}", dir.display()))?;
        let (train, validation) = info.datasets()?;
        if train.content_hash() != samples.meta.data_hash {
            bail!(
                "input data changed since the fit in {} (hash mismatch)",
                dir.display()
            );
        }
        let design = build_design(&train, &samples.meta.spec)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            samples,
            train,
            validation,
            design,
        })
    }

    pub fn model(&self) -> FittedModel<'_> {
        FittedModel {
            samples: &self.samples,
            design: &self.design,
        }
    }

    pub fn label(&self) -> String {
        let l = self.samples.meta.spec.label();
        if l == "custom" {
            self.dir.display().to_string()
        } else {
            l
        }
    }

    pub fn validation(&self) -> Result<&Dataset> {
        self.validation.as_ref().with_context(|| {
            format!(
                "fit in {} has no held-out split; refit with --cutoff",
                self.dir.display()
            )
        })
    }
}
