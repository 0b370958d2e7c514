//! Patient data model, CSV ingestion, and robust standardization.
//!
//! Clinical and imaging features are standardized with per-column
//! median/IQR statistics fitted on training patients only; lesion
//! centroids are scaled per patient (mean subtracted, IQR divided, per
//! axis). Quantiles use linear interpolation (type 7) so results are
//! bit-reproducible.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("failed to open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("schema error in {path}: {detail}")]
    Schema { path: String, detail: String },
    #[error("ingestion error: {0}")]
    Ingestion(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub lesion_id: String,
    /// Centroid in mm (raw) or scaled units (after `scale_centroids`).
    pub centroid: [f64; 3],
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// 1 = progression, relapse, or death within two years.
    pub label: u8,
    pub clinical: Vec<f64>,
    pub lesions: Vec<Lesion>,
}

impl PatientRecord {
    pub fn n_lesions(&self) -> usize {
        self.lesions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub d_clinical: usize,
    pub d_features: usize,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn positive_ratio(&self) -> f64 {
        if self.patients.is_empty() {
            return 0.0;
        }
        let pos = self.patients.iter().filter(|p| p.label == 1).count();
        pos as f64 / self.patients.len() as f64
    }

    /// Clone the patients at `indices` into a new cohort (same dims).
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
            d_clinical: self.d_clinical,
            d_features: self.d_features,
        }
    }

    /// Standardized copy: both scalers applied, centroids scaled per patient.
    pub fn standardized(
        &self,
        clinical: &RobustScaler,
        imaging: &RobustScaler,
    ) -> Result<Cohort, CohortError> {
        let out = clinical.transform(self)?;
        let out = imaging.transform(&out)?;
        Ok(Cohort {
            patients: out.patients.iter().map(scale_centroids).collect(),
            ..out
        })
    }
}

/// Which feature block a scaler was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Clinical,
    Imaging,
}

/// Per-column median / interquartile range, fitted on training data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    pub kind: FeatureKind,
    pub medians: Vec<f64>,
    pub iqrs: Vec<f64>,
}

/// Linear-interpolation (type 7) quantile of an already sorted slice.
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level out of range");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

fn column_stats(values: &mut Vec<f64>) -> (f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let median = quantile_type7(values, 0.5);
    let iqr = quantile_type7(values, 0.75) - quantile_type7(values, 0.25);
    (median, iqr)
}

impl RobustScaler {
    /// Fit on the training cohort. Imaging statistics pool every lesion of
    /// every training patient; clinical statistics see one row per patient.
    pub fn fit(training: &Cohort, kind: FeatureKind) -> RobustScaler {
        assert!(!training.is_empty(), "cannot fit a scaler on an empty cohort");
        let width = match kind {
            FeatureKind::Clinical => training.d_clinical,
            FeatureKind::Imaging => training.d_features,
        };
        let mut medians = Vec::with_capacity(width);
        let mut iqrs = Vec::with_capacity(width);
        for col in 0..width {
            let mut values: Vec<f64> = match kind {
                FeatureKind::Clinical => {
                    training.patients.iter().map(|p| p.clinical[col]).collect()
                }
                FeatureKind::Imaging => training
                    .patients
                    .iter()
                    .flat_map(|p| p.lesions.iter().map(move |l| l.features[col]))
                    .collect(),
            };
            let (median, iqr) = column_stats(&mut values);
            medians.push(median);
            iqrs.push(iqr);
        }
        RobustScaler { kind, medians, iqrs }
    }

    /// `(value - median) / IQR` per column; columns with IQR = 0 map to 0
    /// (centered, unscaled cannot be distinguished from constant anyway).
    pub fn transform(&self, cohort: &Cohort) -> Result<Cohort, CohortError> {
        let width = match self.kind {
            FeatureKind::Clinical => cohort.d_clinical,
            FeatureKind::Imaging => cohort.d_features,
        };
        if width != self.medians.len() {
            return Err(CohortError::Schema {
                path: "<in-memory cohort>".into(),
                detail: format!(
                    "scaler fitted on {} columns, cohort has {width}",
                    self.medians.len()
                ),
            });
        }
        let scale_vec = |values: &[f64]| -> Vec<f64> {
            values
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    if self.iqrs[c] == 0.0 {
                        0.0
                    } else {
                        (v - self.medians[c]) / self.iqrs[c]
                    }
                })
                .collect()
        };
        let patients = cohort
            .patients
            .iter()
            .map(|p| {
                let mut p = p.clone();
                match self.kind {
                    FeatureKind::Clinical => p.clinical = scale_vec(&p.clinical),
                    FeatureKind::Imaging => {
                        for lesion in &mut p.lesions {
                            lesion.features = scale_vec(&lesion.features);
                        }
                    }
                }
                p
            })
            .collect();
        Ok(Cohort {
            patients,
            d_clinical: cohort.d_clinical,
            d_features: cohort.d_features,
        })
    }
}

/// Scale a patient's centroids per axis: subtract the per-patient mean,
/// divide by the per-patient IQR. Single-lesion patients (IQR 0) map to
/// the zero centroid.
pub fn scale_centroids(patient: &PatientRecord) -> PatientRecord {
    let n = patient.lesions.len();
    let mut out = patient.clone();
    for axis in 0..3 {
        let mut values: Vec<f64> = patient.lesions.iter().map(|l| l.centroid[axis]).collect();
        let mean = values.iter().sum::<f64>() / n as f64;
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite centroid"));
        let iqr = quantile_type7(&values, 0.75) - quantile_type7(&values, 0.25);
        for lesion in &mut out.lesions {
            lesion.centroid[axis] = if iqr == 0.0 {
                0.0
            } else {
                (lesion.centroid[axis] - mean) / iqr
            };
        }
    }
    out
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CohortError> {
    let file = std::fs::File::open(path).map_err(|source| CohortError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(file))
}

fn parse_finite(
    raw: &str,
    path: &Path,
    line: u64,
    what: &str,
) -> Result<f64, CohortError> {
    let value: f64 = raw.parse().map_err(|_| CohortError::Schema {
        path: path.display().to_string(),
        detail: format!("line {line}: cannot parse {what} value {raw:?} as a number"),
    })?;
    if !value.is_finite() {
        return Err(CohortError::Schema {
            path: path.display().to_string(),
            detail: format!("line {line}: non-finite {what} value {raw:?}"),
        });
    }
    Ok(value)
}

fn check_header(
    actual: &csv::StringRecord,
    fixed: &[&str],
    prefix: &str,
    path: &Path,
) -> Result<usize, CohortError> {
    let err = |detail: String| CohortError::Schema {
        path: path.display().to_string(),
        detail,
    };
    if actual.len() < fixed.len() + 1 {
        return Err(err(format!(
            "header has {} columns, expected at least {}",
            actual.len(),
            fixed.len() + 1
        )));
    }
    for (i, want) in fixed.iter().enumerate() {
        if &actual[i] != *want {
            return Err(err(format!(
                "header column {i} is {:?}, expected {want:?}",
                &actual[i]
            )));
        }
    }
    let width = actual.len() - fixed.len();
    for k in 0..width {
        let got = &actual[fixed.len() + k];
        let want = format!("{prefix}{k}");
        if got != want {
            return Err(err(format!(
                "header column {} is {got:?}, expected {want:?}",
                fixed.len() + k
            )));
        }
    }
    Ok(width)
}

/// Load and join the clinical and lesion CSV files.
///
/// Every clinical row becomes a patient; every lesion row must join to a
/// known patient and every patient must end up with at least one lesion.
pub fn load_cohort(clinical_path: &Path, lesion_path: &Path) -> Result<Cohort, CohortError> {
    let csv_err = |path: &Path, source: csv::Error| CohortError::Csv {
        path: path.display().to_string(),
        source,
    };

    // Clinical file: one patient per row.
    let mut reader = open_reader(clinical_path)?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(clinical_path, e))?
        .clone();
    let d_clinical = check_header(&header, &["patient_id", "label"], "c", clinical_path)?;
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(clinical_path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let patient_id = record[0].to_string();
        if index.contains_key(&patient_id) {
            return Err(CohortError::Ingestion(format!(
                "duplicate patient_id {patient_id:?} in {}",
                clinical_path.display()
            )));
        }
        let label: u8 = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(CohortError::Schema {
                    path: clinical_path.display().to_string(),
                    detail: format!("line {line}: label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let clinical = (0..d_clinical)
            .map(|k| parse_finite(&record[2 + k], clinical_path, line, "clinical"))
            .collect::<Result<Vec<_>, _>>()?;
        index.insert(patient_id.clone(), patients.len());
        patients.push(PatientRecord {
            patient_id,
            label,
            clinical,
            lesions: Vec::new(),
        });
    }
    if patients.is_empty() {
        return Err(CohortError::Ingestion(format!(
            "{} contains no patients",
            clinical_path.display()
        )));
    }

    // Lesion file: joined on patient_id.
    let mut reader = open_reader(lesion_path)?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(lesion_path, e))?
        .clone();
    let d_features = check_header(
        &header,
        &["patient_id", "lesion_id", "px", "py", "pz"],
        "f",
        lesion_path,
    )?;
    let mut orphans: Vec<String> = Vec::new();
    let mut seen_lesions: HashSet<(usize, String)> = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(lesion_path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let patient_id = &record[0];
        let Some(&pi) = index.get(patient_id) else {
            if !orphans.iter().any(|o| o == patient_id) {
                orphans.push(patient_id.to_string());
            }
            continue;
        };
        let lesion_id = record[1].to_string();
        if !seen_lesions.insert((pi, lesion_id.clone())) {
            return Err(CohortError::Ingestion(format!(
                "duplicate lesion {lesion_id:?} for patient {patient_id:?} in {}",
                lesion_path.display()
            )));
        }
        let mut centroid = [0.0; 3];
        for (a, slot) in centroid.iter_mut().enumerate() {
            *slot = parse_finite(&record[2 + a], lesion_path, line, "centroid")?;
        }
        let features = (0..d_features)
            .map(|k| parse_finite(&record[5 + k], lesion_path, line, "feature"))
            .collect::<Result<Vec<_>, _>>()?;
        patients[pi].lesions.push(Lesion {
            lesion_id,
            centroid,
            features,
        });
    }
    if !orphans.is_empty() {
        return Err(CohortError::Ingestion(format!(
            "lesion rows reference unknown patient ids: {}",
            orphans.join(", ")
        )));
    }
    let lesionless: Vec<&str> = patients
        .iter()
        .filter(|p| p.lesions.is_empty())
        .map(|p| p.patient_id.as_str())
        .collect();
    if !lesionless.is_empty() {
        return Err(CohortError::Ingestion(format!(
            "patients without lesions: {}",
            lesionless.join(", ")
        )));
    }
    let labels: HashSet<u8> = patients.iter().map(|p| p.label).collect();
    if labels.len() < 2 {
        return Err(CohortError::Ingestion(
            "cohort contains a single class; both labels are required".into(),
        ));
    }
    Ok(Cohort {
        patients,
        d_clinical,
        d_features,
    })
}

/// Write the cohort back out in the two-file CSV format. `note` is placed
/// as a `#` comment line above each header (provenance: seed, config).
pub fn write_cohort(
    cohort: &Cohort,
    clinical_path: &Path,
    lesion_path: &Path,
    note: &str,
) -> Result<(), CohortError> {
    let io_err = |path: &Path, source: std::io::Error| CohortError::Io {
        path: path.display().to_string(),
        source,
    };

    let mut clin = String::new();
    if !note.is_empty() {
        let _ = writeln!(clin, "# {note}");
    }
    clin.push_str("patient_id,label");
    for k in 0..cohort.d_clinical {
        let _ = write!(clin, ",c{k}");
    }
    clin.push('\n');
    for p in &cohort.patients {
        let _ = write!(clin, "{},{}", p.patient_id, p.label);
        for v in &p.clinical {
            let _ = write!(clin, ",{v}");
        }
        clin.push('\n');
    }
    std::fs::File::create(clinical_path)
        .and_then(|mut f| f.write_all(clin.as_bytes()))
        .map_err(|e| io_err(clinical_path, e))?;

    let mut les = String::new();
    if !note.is_empty() {
        let _ = writeln!(les, "# {note}");
    }
    les.push_str("patient_id,lesion_id,px,py,pz");
    for k in 0..cohort.d_features {
        let _ = write!(les, ",f{k}");
    }
    les.push('\n');
    for p in &cohort.patients {
        for l in &p.lesions {
            let _ = write!(
                les,
                "{},{},{},{},{}",
                p.patient_id, l.lesion_id, l.centroid[0], l.centroid[1], l.centroid[2]
            );
            for v in &l.features {
                let _ = write!(les, ",{v}");
            }
            les.push('\n');
        }
    }
    std::fs::File::create(lesion_path)
        .and_then(|mut f| f.write_all(les.as_bytes()))
        .map_err(|e| io_err(lesion_path, e))?;
    Ok(())
}
