//! Patient/visit data model, wide-CSV ingestion, grid alignment and
//! cross-validation folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Days per nominal follow-up interval (365.25 / 4).
pub const GRID_PITCH_DAYS: f64 = 91.3;

pub const N_FEATURES: usize = 10;

pub const CSV_HEADER: [&str; 13] = [
    "patient_id",
    "visit_index",
    "hb",
    "ca",
    "cr",
    "ldh",
    "alb",
    "b2m",
    "mpr",
    "sfl_kappa",
    "sfl_lambda",
    "wbc",
    "pd_label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    Hb,
    Ca,
    Cr,
    Ldh,
    Alb,
    B2m,
    Mpr,
    SflKappa,
    SflLambda,
    Wbc,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Hb,
        Feature::Ca,
        Feature::Cr,
        Feature::Ldh,
        Feature::Alb,
        Feature::B2m,
        Feature::Mpr,
        Feature::SflKappa,
        Feature::SflLambda,
        Feature::Wbc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CSV_HEADER[2 + self.index()]
    }

    pub fn unit(self) -> &'static str {
        match self {
            Feature::Hb | Feature::Alb | Feature::Mpr => "g/dL",
            Feature::Ca | Feature::Cr => "mg/dL",
            Feature::Ldh => "U/L",
            Feature::B2m | Feature::SflKappa | Feature::SflLambda => "mg/L",
            Feature::Wbc => "10^9/L",
        }
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The ten blood-work values of one visit. `None` marks a missing measurement.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LabPanel {
    pub values: [Option<f64>; N_FEATURES],
}

impl LabPanel {
    pub fn complete(values: [f64; N_FEATURES]) -> Self {
        LabPanel {
            values: values.map(Some),
        }
    }

    pub fn get(&self, feature: Feature) -> Option<f64> {
        self.values[feature.index()]
    }

    pub fn set(&mut self, feature: Feature, value: Option<f64>) {
        self.values[feature.index()] = value;
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_some_and(f64::is_finite))
    }

    /// Dense values; `None` if any feature is missing.
    pub fn dense(&self) -> Option<[f64; N_FEATURES]> {
        let mut out = [0.0; N_FEATURES];
        for (o, v) in out.iter_mut().zip(&self.values) {
            *o = (*v)?;
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    /// One unit is one nominal 3-month follow-up.
    pub visit_index: u32,
    pub labs: LabPanel,
    pub pd_label: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// Dense lab matrix (visits × features). Fails if any value is missing.
    pub fn dense_labs(&self) -> Result<Vec<[f64; N_FEATURES]>> {
        self.visits
            .iter()
            .map(|v| {
                v.labs.dense().ok_or_else(|| {
                    Error::Validation(format!(
                        "patient {} visit {} has missing labs",
                        self.patient_id, v.visit_index
                    ))
                })
            })
            .collect()
    }

    /// Labels per visit; missing labels read as `false`.
    pub fn labels(&self) -> Vec<bool> {
        self.visits.iter().map(|v| v.pd_label.unwrap_or(false)).collect()
    }

    /// Features never measured across all visits.
    pub fn never_measured(&self) -> Vec<Feature> {
        Feature::ALL
            .into_iter()
            .filter(|f| self.visits.iter().all(|v| v.labs.get(*f).is_none()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visits.len()).sum()
    }

    pub fn find(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    /// Fraction of labelled visits that are progression events.
    pub fn prevalence(&self) -> f64 {
        let (mut pos, mut n) = (0usize, 0usize);
        for v in self.patients.iter().flat_map(|p| &p.visits) {
            if let Some(l) = v.pd_label {
                n += 1;
                pos += l as usize;
            }
        }
        if n == 0 {
            0.0
        } else {
            pos as f64 / n as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::Validation(format!("duplicate patient id {}", p.patient_id)));
            }
            if p.visits.windows(2).any(|w| w[0].visit_index >= w[1].visit_index) {
                return Err(Error::Validation(format!(
                    "visit indices of {} are not strictly increasing",
                    p.patient_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub cohort: Cohort,
    pub excluded: Vec<Exclusion>,
}

fn parse_cell(cell: &str, line: usize, column: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        line,
        message: format!("column {column}: cannot parse '{cell}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("column {column}: non-finite value '{cell}'"),
        });
    }
    if v < 0.0 {
        return Err(Error::Validation(format!(
            "line {line}: negative lab value {v} in column {column}"
        )));
    }
    Ok(Some(v))
}

/// Parse a cohort from any reader holding the wide CSV.
pub fn read_cohort<R: std::io::Read>(reader: R) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(Error::Validation("empty cohort file".into()));
    }
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header mismatch: expected '{}', got '{}'",
                CSV_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    // patient_id -> visit_index -> visit; BTreeMap keeps the last row per key
    let mut order: Vec<String> = Vec::new();
    let mut by_patient: BTreeMap<String, BTreeMap<u32, Visit>> = BTreeMap::new();
    let mut rows = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        rows += 1;
        if record.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", CSV_HEADER.len(), record.len()),
            });
        }
        let pid = record[0].to_string();
        if pid.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty patient_id".into(),
            });
        }
        let visit_index: u32 = record[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("visit_index '{}' is not a non-negative integer", &record[1]),
        })?;
        let mut labs = LabPanel::default();
        for f in Feature::ALL {
            labs.set(f, parse_cell(&record[2 + f.index()], line, f.name())?);
        }
        let pd_label = match &record[12] {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("pd_label must be 0, 1 or empty, got '{other}'"),
                })
            }
        };
        let visits = by_patient.entry(pid.clone()).or_insert_with(|| {
            order.push(pid.clone());
            BTreeMap::new()
        });
        visits.insert(
            visit_index,
            Visit {
                visit_index,
                labs,
                pd_label,
            },
        );
    }
    if rows == 0 {
        return Err(Error::Validation("cohort file contains no rows".into()));
    }

    let mut patients = Vec::new();
    let mut excluded = Vec::new();
    for pid in order {
        let visits: Vec<Visit> = by_patient.remove(&pid).unwrap().into_values().collect();
        let record = PatientRecord {
            patient_id: pid,
            visits,
        };
        match exclusion_reason(&record) {
            Some(reason) => excluded.push(Exclusion {
                patient_id: record.patient_id,
                reason,
            }),
            None => patients.push(record),
        }
    }
    let cohort = Cohort {
        patients,
        provenance: Provenance::Ingested,
    };
    cohort.validate()?;
    Ok(IngestReport { cohort, excluded })
}

/// Reason a record cannot enter the analysis, if any.
pub fn exclusion_reason(record: &PatientRecord) -> Option<String> {
    let missing = record.never_measured();
    if !missing.is_empty() {
        let names: Vec<_> = missing.iter().map(|f| f.name()).collect();
        return Some(format!("never measured: {}", names.join(";")));
    }
    if record.visits.len() < 2 {
        return Some("fewer than two visits".into());
    }
    None
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_cohort_to<W: std::io::Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for p in &cohort.patients {
        for v in &p.visits {
            let mut row = Vec::with_capacity(CSV_HEADER.len());
            row.push(p.patient_id.clone());
            row.push(v.visit_index.to_string());
            row.extend(v.labs.values.iter().map(|x| fmt_opt(*x)));
            row.push(match v.pd_label {
                None => String::new(),
                Some(true) => "1".into(),
                Some(false) => "0".into(),
            });
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<cohort writer>", e))?;
    Ok(())
}

pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort_to(cohort, std::io::BufWriter::new(file))
}

pub fn write_exclusions(excluded: &[Exclusion], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "reason"])?;
    for e in excluded {
        w.write_record([&e.patient_id, &e.reason])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A measurement taken at an irregular day offset from baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RawVisit {
    pub day_offset: f64,
    pub labs: LabPanel,
    pub pd_label: Option<bool>,
}

/// Snap raw visits onto the 3-month grid. Two raw visits falling on the same
/// grid point resolve to the later one; empty grid points are left out.
pub fn align_visits(raw_visits: &[RawVisit]) -> Vec<Visit> {
    let mut order: Vec<usize> = (0..raw_visits.len()).collect();
    // stable: equal offsets keep input order, so "later" means later in the input
    order.sort_by(|&a, &b| {
        raw_visits[a]
            .day_offset
            .partial_cmp(&raw_visits[b].day_offset)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut grid: BTreeMap<u32, Visit> = BTreeMap::new();
    for i in order {
        let raw = &raw_visits[i];
        let visit_index = (raw.day_offset.max(0.0) / GRID_PITCH_DAYS).round() as u32;
        grid.insert(
            visit_index,
            Visit {
                visit_index,
                labs: raw.labs,
                pd_label: raw.pd_label,
            },
        );
    }
    grid.into_values().collect()
}

/// Patient → fold index assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for f in self.assignment.values() {
            s[*f] += 1;
        }
        s
    }

    /// (training, validation) patient records for `fold`, in cohort order.
    pub fn partition<'a>(&self, cohort: &'a Cohort, fold: usize) -> (Vec<&'a PatientRecord>, Vec<&'a PatientRecord>) {
        cohort
            .patients
            .iter()
            .partition(|p| self.fold_of(&p.patient_id) != Some(fold))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "fold"])?;
        for (p, f) in &self.assignment {
            w.write_record([p.as_str(), &f.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path.as_ref())?;
        let mut assignment = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let fold: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                line: i + 2,
                message: "fold must be a non-negative integer".into(),
            })?;
            assignment.insert(rec[0].to_string(), fold);
        }
        let k = assignment.values().max().map_or(0, |m| m + 1);
        Ok(FoldAssignment { k, assignment })
    }
}

/// Seeded, size-balanced k-fold split over patients.
pub fn split_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be at least 2, got {k}")));
    }
    if cohort.is_empty() {
        return Err(Error::Validation("cannot split an empty cohort".into()));
    }
    if k > cohort.len() {
        return Err(Error::Config(format!(
            "fold count {k} exceeds patient count {}",
            cohort.len()
        )));
    }
    // sort ids first so the split does not depend on file row order
    let mut ids: Vec<&str> = cohort.patients.iter().map(|p| p.patient_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldAssignment { k, assignment })
}
