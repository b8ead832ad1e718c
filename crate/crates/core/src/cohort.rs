//! Visit records, CSV ingestion, inclusion criteria and current-regimen grouping.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regimen::{Group, Regimen};

/// Column order of the cohort CSV. Readers locate columns by name, writers
/// always emit this exact order.
pub const CSV_HEADER: [&str; 22] = [
    "visit_id",
    "age",
    "sex",
    "race",
    "kidney_contraindication",
    "hba1c_last",
    "hba1c_p25",
    "hba1c_median",
    "hba1c_mean",
    "hba1c_p75",
    "bmi_last",
    "bmi_p25",
    "bmi_median",
    "bmi_mean",
    "bmi_p75",
    "cur_metformin",
    "cur_insulin",
    "cur_other",
    "rx_metformin",
    "rx_insulin",
    "rx_other",
    "hba1c_after",
];

pub const HBA1C_RANGE: (f64, f64) = (3.0, 20.0);
pub const BMI_RANGE: (f64, f64) = (10.0, 80.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientVisit {
    pub visit_id: String,
    pub age: f64,
    pub sex: String,
    pub race: String,
    pub kidney_contraindication: bool,
    pub hba1c_last: f64,
    pub hba1c_p25: f64,
    pub hba1c_median: f64,
    pub hba1c_mean: f64,
    pub hba1c_p75: f64,
    pub bmi_last: f64,
    pub bmi_p25: f64,
    pub bmi_median: f64,
    pub bmi_mean: f64,
    pub bmi_p75: f64,
    pub current_regimen: Regimen,
    pub prescribed_regimen: Regimen,
    pub hba1c_after: f64,
}

impl PatientVisit {
    /// Observed HbA1c reduction after the prescription.
    pub fn reduction(&self) -> f64 {
        self.hba1c_last - self.hba1c_after
    }

    pub fn group(&self) -> Option<Group> {
        self.current_regimen.group()
    }

    /// Checks the record-level invariants, returning a description of the
    /// first violation.
    pub fn validate(&self) -> Result<(), String> {
        let in_open = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && v > lo && v < hi;
        if !(self.age.is_finite() && self.age > 0.0) {
            return Err(format!("age must be positive, got {}", self.age));
        }
        let hba1c = [
            ("hba1c_last", self.hba1c_last),
            ("hba1c_p25", self.hba1c_p25),
            ("hba1c_median", self.hba1c_median),
            ("hba1c_mean", self.hba1c_mean),
            ("hba1c_p75", self.hba1c_p75),
            ("hba1c_after", self.hba1c_after),
        ];
        for (name, v) in hba1c {
            if !in_open(v, HBA1C_RANGE) {
                return Err(format!("{name} = {v} outside (3, 20)"));
            }
        }
        let bmi = [
            ("bmi_last", self.bmi_last),
            ("bmi_p25", self.bmi_p25),
            ("bmi_median", self.bmi_median),
            ("bmi_mean", self.bmi_mean),
            ("bmi_p75", self.bmi_p75),
        ];
        for (name, v) in bmi {
            if !in_open(v, BMI_RANGE) {
                return Err(format!("{name} = {v} outside (10, 80)"));
            }
        }
        if !(self.hba1c_p25 <= self.hba1c_median && self.hba1c_median <= self.hba1c_p75) {
            return Err(format!(
                "hba1c quantiles out of order: p25 {} median {} p75 {}",
                self.hba1c_p25, self.hba1c_median, self.hba1c_p75
            ));
        }
        if !(self.bmi_p25 <= self.bmi_median && self.bmi_median <= self.bmi_p75) {
            return Err(format!(
                "bmi quantiles out of order: p25 {} median {} p75 {}",
                self.bmi_p25, self.bmi_median, self.bmi_p75
            ));
        }
        Ok(())
    }
}

/// Numeric visit features that models and policy trees may reference.
/// Sex and race are deliberately absent: they only enter regressors through
/// one-hot encoding and are never policy split candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Age,
    Hba1cLast,
    Hba1cP25,
    Hba1cMedian,
    Hba1cMean,
    Hba1cP75,
    BmiLast,
    BmiP25,
    BmiMedian,
    BmiMean,
    BmiP75,
    KidneyContraindication,
}

impl Feature {
    pub const ALL: [Feature; 12] = [
        Feature::Age,
        Feature::Hba1cLast,
        Feature::Hba1cP25,
        Feature::Hba1cMedian,
        Feature::Hba1cMean,
        Feature::Hba1cP75,
        Feature::BmiLast,
        Feature::BmiP25,
        Feature::BmiMedian,
        Feature::BmiMean,
        Feature::BmiP75,
        Feature::KidneyContraindication,
    ];

    /// Age plus every HbA1c and BMI statistic.
    pub const CONTINUOUS: [Feature; 11] = [
        Feature::Age,
        Feature::Hba1cLast,
        Feature::Hba1cP25,
        Feature::Hba1cMedian,
        Feature::Hba1cMean,
        Feature::Hba1cP75,
        Feature::BmiLast,
        Feature::BmiP25,
        Feature::BmiMedian,
        Feature::BmiMean,
        Feature::BmiP75,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Age => "age",
            Feature::Hba1cLast => "hba1c_last",
            Feature::Hba1cP25 => "hba1c_p25",
            Feature::Hba1cMedian => "hba1c_median",
            Feature::Hba1cMean => "hba1c_mean",
            Feature::Hba1cP75 => "hba1c_p75",
            Feature::BmiLast => "bmi_last",
            Feature::BmiP25 => "bmi_p25",
            Feature::BmiMedian => "bmi_median",
            Feature::BmiMean => "bmi_mean",
            Feature::BmiP75 => "bmi_p75",
            Feature::KidneyContraindication => "kidney_contraindication",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn is_boolean(self) -> bool {
        self == Feature::KidneyContraindication
    }

    pub fn value(self, v: &PatientVisit) -> f64 {
        match self {
            Feature::Age => v.age,
            Feature::Hba1cLast => v.hba1c_last,
            Feature::Hba1cP25 => v.hba1c_p25,
            Feature::Hba1cMedian => v.hba1c_median,
            Feature::Hba1cMean => v.hba1c_mean,
            Feature::Hba1cP75 => v.hba1c_p75,
            Feature::BmiLast => v.bmi_last,
            Feature::BmiP25 => v.bmi_p25,
            Feature::BmiMedian => v.bmi_median,
            Feature::BmiMean => v.bmi_mean,
            Feature::BmiP75 => v.bmi_p75,
            Feature::KidneyContraindication => {
                if v.kidney_contraindication {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// All numeric features of a visit in `Feature::ALL` order.
pub fn feature_vector(v: &PatientVisit) -> [f64; 12] {
    Feature::ALL.map(|f| f.value(v))
}

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{column}`: {detail}")]
    ParseFailure {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("row {row}: {detail}")]
    InvariantViolation { row: usize, detail: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub visits: Vec<PatientVisit>,
    pub provenance: String,
}

impl Cohort {
    pub fn new(visits: Vec<PatientVisit>, provenance: impl Into<String>) -> Cohort {
        Cohort {
            visits,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PatientVisit> {
        self.visits.iter()
    }

    /// Keeps visits matching `keep`, preserving order and provenance.
    pub fn filtered(&self, mut keep: impl FnMut(&PatientVisit) -> bool) -> Cohort {
        Cohort {
            visits: self.visits.iter().filter(|v| keep(v)).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Rejects duplicate visit ids and invalid records. Rows are 1-based.
    pub fn validate(&self) -> Result<(), CohortError> {
        let mut seen = HashSet::with_capacity(self.visits.len());
        for (i, v) in self.visits.iter().enumerate() {
            v.validate()
                .map_err(|detail| CohortError::InvariantViolation { row: i + 1, detail })?;
            if !seen.insert(v.visit_id.as_str()) {
                return Err(CohortError::InvariantViolation {
                    row: i + 1,
                    detail: format!("duplicate visit_id `{}`", v.visit_id),
                });
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CohortError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        let b = |x: bool| if x { "1" } else { "0" };
        for v in &self.visits {
            let (cm, ci, co) = v.current_regimen.flags();
            let (rm, ri, ro) = v.prescribed_regimen.flags();
            w.write_record([
                v.visit_id.clone(),
                v.age.to_string(),
                v.sex.clone(),
                v.race.clone(),
                b(v.kidney_contraindication).to_string(),
                v.hba1c_last.to_string(),
                v.hba1c_p25.to_string(),
                v.hba1c_median.to_string(),
                v.hba1c_mean.to_string(),
                v.hba1c_p75.to_string(),
                v.bmi_last.to_string(),
                v.bmi_p25.to_string(),
                v.bmi_median.to_string(),
                v.bmi_mean.to_string(),
                v.bmi_p75.to_string(),
                b(cm).to_string(),
                b(ci).to_string(),
                b(co).to_string(),
                b(rm).to_string(),
                b(ri).to_string(),
                b(ro).to_string(),
                v.hba1c_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CohortError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(reader: R, provenance: &str) -> Result<Cohort, CohortError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let header = r.headers()?.clone();
        let mut index = [0usize; 22];
        for (slot, name) in index.iter_mut().zip(CSV_HEADER) {
            *slot = header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| CohortError::MissingColumn(name.to_string()))?;
        }

        let mut visits = Vec::new();
        for (i, record) in r.records().enumerate() {
            let row = i + 1;
            let record = record?;
            let field = |col: usize| record.get(index[col]).unwrap_or("").trim();
            let num = |col: usize| -> Result<f64, CohortError> {
                let raw = field(col);
                raw.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CohortError::ParseFailure {
                        row,
                        column: CSV_HEADER[col].to_string(),
                        detail: format!("expected a decimal number, got `{raw}`"),
                    })
            };
            let flag = |col: usize| -> Result<bool, CohortError> {
                match field(col) {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    raw => Err(CohortError::ParseFailure {
                        row,
                        column: CSV_HEADER[col].to_string(),
                        detail: format!("expected 0 or 1, got `{raw}`"),
                    }),
                }
            };
            let visit_id = field(0).to_string();
            if visit_id.is_empty() {
                return Err(CohortError::ParseFailure {
                    row,
                    column: "visit_id".into(),
                    detail: "empty identifier".into(),
                });
            }
            let visit = PatientVisit {
                visit_id,
                age: num(1)?,
                sex: field(2).to_string(),
                race: field(3).to_string(),
                kidney_contraindication: flag(4)?,
                hba1c_last: num(5)?,
                hba1c_p25: num(6)?,
                hba1c_median: num(7)?,
                hba1c_mean: num(8)?,
                hba1c_p75: num(9)?,
                bmi_last: num(10)?,
                bmi_p25: num(11)?,
                bmi_median: num(12)?,
                bmi_mean: num(13)?,
                bmi_p75: num(14)?,
                current_regimen: Regimen::from_flags(flag(15)?, flag(16)?, flag(17)?),
                prescribed_regimen: Regimen::from_flags(flag(18)?, flag(19)?, flag(20)?),
                hba1c_after: num(21)?,
            };
            visit
                .validate()
                .map_err(|detail| CohortError::InvariantViolation { row, detail })?;
            visits.push(visit);
        }
        let cohort = Cohort::new(visits, provenance);
        cohort.validate()?;
        Ok(cohort)
    }
}

/// Reads and validates a cohort CSV file.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort, CohortError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    Cohort::read_csv(std::io::BufReader::new(file), &path.display().to_string())
}

/// Whether a visit meets every inclusion criterion: adult (strictly over 18),
/// HbA1c high enough for its treatment status, and an observed decrease.
pub fn is_included(v: &PatientVisit) -> bool {
    let adult = v.age > 18.0;
    let glycemic = if v.current_regimen == Regimen::NoMedication {
        v.hba1c_last >= 5.7 || v.hba1c_p75 >= 7.0
    } else {
        v.hba1c_last >= 7.0 || v.hba1c_p75 >= 7.0
    };
    let decreased = v.hba1c_after < v.hba1c_last;
    adult && glycemic && decreased
}

pub fn inclusion_filter(cohort: &Cohort) -> Cohort {
    cohort.filtered(is_included)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grouped {
    pub groups: BTreeMap<Group, Cohort>,
    /// Visits whose current regimen is outside the four supported groups.
    pub unsupported: Vec<PatientVisit>,
}

impl Grouped {
    pub fn unsupported_count(&self) -> usize {
        self.unsupported.len()
    }
}

pub fn group_by_current(cohort: &Cohort) -> Grouped {
    let mut groups: BTreeMap<Group, Cohort> = Group::ALL
        .into_iter()
        .map(|g| (g, Cohort::new(Vec::new(), cohort.provenance.clone())))
        .collect();
    let mut unsupported = Vec::new();
    for v in &cohort.visits {
        match v.group() {
            Some(g) => groups
                .get_mut(&g)
                .expect("all groups present")
                .visits
                .push(v.clone()),
            None => unsupported.push(v.clone()),
        }
    }
    if !unsupported.is_empty() {
        log::warn!(
            "{} visits on unsupported current regimens excluded from grouping",
            unsupported.len()
        );
    }
    Grouped {
        groups,
        unsupported,
    }
}
