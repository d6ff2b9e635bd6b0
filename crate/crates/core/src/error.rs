use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("unresolved hospital_id {hospital_id} at row {row}")]
    UnresolvedHospital { hospital_id: String, row: usize },
    #[error("duplicate hospital_id {hospital_id} at row {row}")]
    DuplicateHospital { hospital_id: String, row: usize },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("missing hospital attribute `{name}`{}", hospital.as_ref().map(|h| format!(" for hospital {h}")).unwrap_or_default())]
    MissingAttribute {
        name: String,
        hospital: Option<String>,
    },
    #[error("column `{0}` has zero variance and cannot be standardized")]
    ZeroVariance(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(&'static str),
    #[error("non-finite value in {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("infeasible matching: {treated_without_controls} of {treated} treated units have no admissible control")]
    InfeasibleMatching {
        treated: usize,
        treated_without_controls: usize,
        admissible_counts: Vec<usize>,
    },
    #[error("posterior samples do not match: {0}")]
    Mismatch(String),
    #[error("malformed samples file: {0}")]
    Samples(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_) | Error::NonFinite { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
