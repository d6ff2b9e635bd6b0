//! Grouped binary-outcome data: patients nested in hospitals.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Sha256Writer;

/// Hospital attributes every hospitals file must carry, in file order.
pub const HOSPITAL_ATTRIBUTES: [&str; 4] = ["ntbr", "rtbr", "pci", "beds"];

const PATIENT_FIXED: [&str; 5] = [
    "patient_id",
    "hospital_id",
    "outcome",
    "age",
    "admit_period",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub hospital_id: String,
    /// Death within 30 days.
    pub outcome: bool,
    pub covariates: Vec<f64>,
    /// Years.
    pub age: f64,
    pub admit_period: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HospitalRecord {
    pub hospital_id: String,
    /// Admissions over the reference window.
    pub volume: u64,
    /// Attribute values by name; `None` marks a missing optional value.
    pub attributes: BTreeMap<String, Option<f64>>,
}

impl HospitalRecord {
    pub fn attribute(&self, name: &str) -> Option<f64> {
        self.attributes.get(name).copied().flatten()
    }

    /// `log(volume + 1)`.
    pub fn log_volume(&self) -> f64 {
        (self.volume as f64).ln_1p()
    }
}

/// Validated dataset. Patients are stored grouped by hospital, in hospital
/// order, preserving input order within each hospital.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    covariate_names: Vec<String>,
    attribute_names: Vec<String>,
    hospitals: Vec<HospitalRecord>,
    patients: Vec<PatientRecord>,
    patient_hospital: Vec<usize>,
    offsets: Vec<usize>,
}

impl Dataset {
    pub fn new(
        covariate_names: Vec<String>,
        hospitals: Vec<HospitalRecord>,
        patients: Vec<PatientRecord>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(hospitals.len());
        for (row, h) in hospitals.iter().enumerate() {
            if index.insert(h.hospital_id.clone(), row).is_some() {
                return Err(Error::DuplicateHospital {
                    hospital_id: h.hospital_id.clone(),
                    row: row + 1,
                });
            }
        }
        let attribute_names: Vec<String> = hospitals
            .first()
            .map(|h| h.attributes.keys().cloned().collect())
            .unwrap_or_default();
        for (row, h) in hospitals.iter().enumerate() {
            if !h.attributes.keys().eq(attribute_names.iter()) {
                return Err(Error::Invalid(format!(
                    "hospital {} (row {}) does not share the attribute schema",
                    h.hospital_id,
                    row + 1
                )));
            }
        }
        let d = covariate_names.len();
        let mut owner = Vec::with_capacity(patients.len());
        for (row, p) in patients.iter().enumerate() {
            if p.covariates.len() != d {
                return Err(Error::Invalid(format!(
                    "patient {} (row {}) has {} covariates, expected {d}",
                    p.patient_id,
                    row + 1,
                    p.covariates.len()
                )));
            }
            let h = *index
                .get(&p.hospital_id)
                .ok_or_else(|| Error::UnresolvedHospital {
                    hospital_id: p.hospital_id.clone(),
                    row: row + 1,
                })?;
            owner.push(h);
        }

        let mut order: Vec<usize> = (0..patients.len()).collect();
        order.sort_by_key(|&i| owner[i]);
        let mut slots: Vec<Option<PatientRecord>> = patients.into_iter().map(Some).collect();
        let patients: Vec<PatientRecord> =
            order.iter().map(|&i| slots[i].take().unwrap()).collect();
        let patient_hospital: Vec<usize> = order.iter().map(|&i| owner[i]).collect();

        let mut offsets = vec![0usize; hospitals.len() + 1];
        for &h in &patient_hospital {
            offsets[h + 1] += 1;
        }
        for h in 0..hospitals.len() {
            offsets[h + 1] += offsets[h];
        }

        Ok(Self {
            covariate_names,
            attribute_names,
            hospitals,
            patients,
            patient_hospital,
            offsets,
        })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn hospitals(&self) -> &[HospitalRecord] {
        &self.hospitals
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    /// Hospital index of each patient, aligned with [`Dataset::patients`].
    pub fn patient_hospitals(&self) -> &[usize] {
        &self.patient_hospital
    }

    pub fn n_hospitals(&self) -> usize {
        self.hospitals.len()
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Patients treated at hospital `h`.
    pub fn n_h(&self, h: usize) -> usize {
        self.offsets[h + 1] - self.offsets[h]
    }

    /// Index range of hospital `h`'s patients.
    pub fn hospital_patients(&self, h: usize) -> std::ops::Range<usize> {
        self.offsets[h]..self.offsets[h + 1]
    }

    pub fn hospital_index(&self, hospital_id: &str) -> Option<usize> {
        self.hospitals
            .iter()
            .position(|h| h.hospital_id == hospital_id)
    }

    /// Grand mean outcome; NaN for an empty dataset.
    pub fn ybar(&self) -> f64 {
        self.patients.iter().filter(|p| p.outcome).count() as f64 / self.patients.len() as f64
    }

    /// Raw observed rate `O_h`; NaN when the hospital has no patients.
    pub fn raw_rate(&self, h: usize) -> f64 {
        let r = self.hospital_patients(h);
        let n = r.len();
        self.patients[r].iter().filter(|p| p.outcome).count() as f64 / n as f64
    }

    /// Same hospitals, a different patient subset.
    pub fn with_patients(&self, patients: Vec<PatientRecord>) -> Result<Self> {
        Dataset::new(
            self.covariate_names.clone(),
            self.hospitals.clone(),
            patients,
        )
    }

    /// SHA-256 over the canonical content of the dataset.
    pub fn content_hash(&self) -> String {
        let mut w = Sha256Writer::new();
        w.field(&self.covariate_names.join(","));
        for h in &self.hospitals {
            w.field(&h.hospital_id);
            w.field(&h.volume.to_string());
            for (k, v) in &h.attributes {
                w.field(k);
                w.field(&v.map(|x| x.to_string()).unwrap_or_default());
            }
        }
        for p in &self.patients {
            w.field(&p.patient_id);
            w.field(&p.hospital_id);
            w.field(if p.outcome { "1" } else { "0" });
            w.field(&p.age.to_string());
            w.field(&p.admit_period.to_string());
            for x in &p.covariates {
                w.field(&x.to_string());
            }
        }
        w.finish()
    }
}

/// Read and validate the patients and hospitals CSV files.
pub fn load_dataset(
    patients_path: impl AsRef<Path>,
    hospitals_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let hospitals = read_hospitals(hospitals_path.as_ref())?;
    let (covariate_names, patients) = read_patients(patients_path.as_ref())?;
    Dataset::new(covariate_names, hospitals, patients)
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
}

fn schema_err(path: &Path, row: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn parse_f64(raw: &str, what: &str, path: &Path, row: usize) -> Result<f64> {
    let v: f64 = raw.parse().map_err(|_| {
        schema_err(
            path,
            row,
            format!("{what}: cannot parse `{raw}` as a number"),
        )
    })?;
    if !v.is_finite() {
        return Err(schema_err(
            path,
            row,
            format!("{what}: non-finite value `{raw}`"),
        ));
    }
    Ok(v)
}

fn parse_binary(raw: &str, what: &str, path: &Path, row: usize) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(schema_err(
            path,
            row,
            format!("{what} must be 0 or 1, got `{raw}`"),
        )),
    }
}

fn read_hospitals(path: &Path) -> Result<Vec<HospitalRecord>> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let id_col = column(&headers, "hospital_id", path)?;
    let vol_col = column(&headers, "volume", path)?;
    let mut attr_cols = Vec::new();
    for name in HOSPITAL_ATTRIBUTES {
        attr_cols.push((name.to_string(), column(&headers, name, path)?));
    }
    // Any further columns are carried as extra real-valued attributes.
    for (i, h) in headers.iter().enumerate() {
        if i != id_col && i != vol_col && !HOSPITAL_ATTRIBUTES.contains(&h) {
            attr_cols.push((h.to_string(), i));
        }
    }

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let hospital_id = get(id_col).to_string();
        if hospital_id.is_empty() {
            return Err(schema_err(path, row, "empty hospital_id"));
        }
        let volume: u64 = get(vol_col).parse().map_err(|_| {
            schema_err(
                path,
                row,
                format!(
                    "volume must be a nonnegative integer, got `{}`",
                    get(vol_col)
                ),
            )
        })?;
        let mut attributes = BTreeMap::new();
        for (name, c) in &attr_cols {
            let raw = get(*c);
            let value = match name.as_str() {
                "pci" => Some(if parse_binary(raw, "pci", path, row)? {
                    1.0
                } else {
                    0.0
                }),
                "beds" if raw.is_empty() => None,
                "beds" => Some(raw.parse::<u64>().map_err(|_| {
                    schema_err(
                        path,
                        row,
                        format!("beds must be a nonnegative integer, got `{raw}`"),
                    )
                })? as f64),
                "ntbr" | "rtbr" => {
                    let v = parse_f64(raw, name, path, row)?;
                    if v < 0.0 {
                        return Err(schema_err(path, row, format!("{name} must be nonnegative")));
                    }
                    Some(v)
                }
                _ if raw.is_empty() => None,
                _ => Some(parse_f64(raw, name, path, row)?),
            };
            attributes.insert(name.clone(), value);
        }
        out.push(HospitalRecord {
            hospital_id,
            volume,
            attributes,
        });
    }
    // Duplicate ids are reported by Dataset::new with the row number.
    Ok(out)
}

fn read_patients(path: &Path) -> Result<(Vec<String>, Vec<PatientRecord>)> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let mut fixed = [0usize; 5];
    for (slot, name) in fixed.iter_mut().zip(PATIENT_FIXED) {
        *slot = column(&headers, name, path)?;
    }
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|i| !fixed.contains(i)).collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&i| headers[i].to_string()).collect();

    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let outcome = parse_binary(get(fixed[2]), "outcome", path, row)?;
        let age = parse_f64(get(fixed[3]), "age", path, row)?;
        let admit_period: i64 = get(fixed[4]).parse().map_err(|_| {
            schema_err(
                path,
                row,
                format!("admit_period must be an integer, got `{}`", get(fixed[4])),
            )
        })?;
        let covariates = cov_cols
            .iter()
            .map(|&c| parse_f64(get(c), &headers[c], path, row))
            .collect::<Result<Vec<_>>>()?;
        out.push(PatientRecord {
            patient_id: get(fixed[0]).to_string(),
            hospital_id: get(fixed[1]).to_string(),
            outcome,
            covariates,
            age,
            admit_period,
        });
    }
    Ok((covariate_names, out))
}

/// Write the dataset in the same CSV schemas [`load_dataset`] reads.
pub fn write_dataset(
    d: &Dataset,
    patients_path: impl AsRef<Path>,
    hospitals_path: impl AsRef<Path>,
) -> Result<()> {
    let hp = hospitals_path.as_ref();
    let mut w = csv::Writer::from_path(hp).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(hp, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    let extra: Vec<&String> = d
        .attribute_names()
        .iter()
        .filter(|n| !HOSPITAL_ATTRIBUTES.contains(&n.as_str()))
        .collect();
    let mut header = vec!["hospital_id".to_string(), "volume".to_string()];
    header.extend(HOSPITAL_ATTRIBUTES.iter().map(|s| s.to_string()));
    header.extend(extra.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for h in d.hospitals() {
        let mut rec = vec![h.hospital_id.clone(), h.volume.to_string()];
        for name in HOSPITAL_ATTRIBUTES
            .iter()
            .copied()
            .chain(extra.iter().map(|s| s.as_str()))
        {
            rec.push(match h.attribute(name) {
                None => String::new(),
                Some(v) if name == "pci" || name == "beds" => format!("{}", v as u64),
                Some(v) => v.to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(hp, e))?;

    let pp = patients_path.as_ref();
    let mut w = csv::Writer::from_path(pp).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(pp, io),
        other => Error::Invalid(format!("{other:?}")),
    })?;
    let mut header: Vec<String> = PATIENT_FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(d.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for p in d.patients() {
        let mut rec = vec![
            p.patient_id.clone(),
            p.hospital_id.clone(),
            if p.outcome { "1".into() } else { "0".into() },
            p.age.to_string(),
            p.admit_period.to_string(),
        ];
        rec.extend(p.covariates.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(pp, e))?;
    Ok(())
}

/// Training/validation partition by admission period.
#[derive(Debug, Clone)]
pub struct PeriodSplit {
    /// Patients with `admit_period <= cutoff`; shares the full hospital list.
    pub train: Dataset,
    pub validation: Dataset,
    /// Hospitals with validation patients but no training patients.
    pub cold_start: Vec<usize>,
}

pub fn split_by_period(d: &Dataset, cutoff: i64) -> Result<PeriodSplit> {
    let (train, validation): (Vec<_>, Vec<_>) = d
        .patients()
        .iter()
        .cloned()
        .partition(|p| p.admit_period <= cutoff);
    if train.is_empty() {
        return Err(Error::EmptySplit("training"));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let train = d.with_patients(train)?;
    let validation = d.with_patients(validation)?;
    let cold_start = (0..d.n_hospitals())
        .filter(|&h| train.n_h(h) == 0 && validation.n_h(h) > 0)
        .collect();
    Ok(PeriodSplit {
        train,
        validation,
        cold_start,
    })
}
