//! Patient-grouped embedding datasets and patient-level folds.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{FslError, Result};
use crate::rng;

pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

/// One frame: identity, class label and its feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub patient_id: String,
    pub sequence_id: String,
    pub frame_index: u32,
    pub label: usize,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            patient_id: self.patient_id.clone(),
            sequence_id: self.sequence_id.clone(),
            frame_index: self.frame_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub patient_id: String,
    pub sequence_id: String,
    pub frame_index: u32,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.patient_id, self.sequence_id, self.frame_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub dim: usize,
    pub num_classes: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl Dataset {
    /// Builds a dataset and rejects it if any invariant is violated.
    pub fn new(name: impl Into<String>, dim: usize, num_classes: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        let ds = Dataset { name: name.into(), dim, num_classes, records };
        let report = validate_dataset(&ds);
        if report.is_empty() {
            Ok(ds)
        } else {
            Err(FslError::InvalidDataset(report.to_string()))
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn patients(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.patient_id.clone()).collect()
    }

    /// Patients carrying at least one frame of `label`.
    pub fn patients_with_label(&self, label: usize) -> BTreeSet<String> {
        self.records.iter().filter(|r| r.label == label).map(|r| r.patient_id.clone()).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for r in &self.records {
            if r.label < counts.len() {
                counts[r.label] += 1;
            }
        }
        counts
    }

    pub fn class_name(&self, label: usize) -> String {
        match (self.num_classes, label) {
            (2, BENIGN) => "benign".into(),
            (2, MALIGNANT) => "malignant".into(),
            _ => format!("class{label}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyDataset,
    DimensionMismatch,
    LabelOutOfRange,
    DuplicateIdentity,
    NonFiniteValue,
    EmptyIdentifier,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::EmptyDataset => "empty dataset",
            Rule::DimensionMismatch => "dimension mismatch",
            Rule::LabelOutOfRange => "label out of range",
            Rule::DuplicateIdentity => "duplicate identity",
            Rule::NonFiniteValue => "non-finite value",
            Rule::EmptyIdentifier => "empty identifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: Option<RecordKey>,
    pub rule: Rule,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            match &v.record {
                Some(key) => write!(f, "{} at {key}", v.rule)?,
                None => write!(f, "{}", v.rule)?,
            }
        }
        Ok(())
    }
}

/// Checks every dataset invariant and reports all violations; never fails.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    if dataset.records.is_empty() {
        violations.push(Violation { record: None, rule: Rule::EmptyDataset });
    }
    let mut seen = HashSet::with_capacity(dataset.records.len());
    for r in &dataset.records {
        let key = r.key();
        let mut flag = |rule| violations.push(Violation { record: Some(key.clone()), rule });
        if r.patient_id.is_empty() || r.sequence_id.is_empty() {
            flag(Rule::EmptyIdentifier);
        }
        if r.vector.len() != dataset.dim {
            flag(Rule::DimensionMismatch);
        }
        if r.label >= dataset.num_classes {
            flag(Rule::LabelOutOfRange);
        }
        if r.vector.iter().any(|v| !v.is_finite()) {
            flag(Rule::NonFiniteValue);
        }
        if !seen.insert(key.clone()) {
            violations.push(Violation { record: Some(key), rule: Rule::DuplicateIdentity });
        }
    }
    ValidationReport { violations }
}

/// Patient → fold index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub mapping: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold(&self, index: usize) -> BTreeSet<String> {
        self.mapping.iter().filter(|(_, &f)| f == index).map(|(p, _)| p.clone()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.mapping.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

fn check_fold_count(k: usize, patients: usize) -> Result<()> {
    if k < 2 {
        return Err(FslError::InvalidSpec { field: "k", reason: "need at least 2 folds".into() });
    }
    if patients < k {
        return Err(FslError::FoldCountExceedsPatients { folds: k, patients });
    }
    Ok(())
}

/// Seeded shuffle of the sorted patient list, dealt round-robin into `k` folds.
pub fn make_folds<'a, I>(patient_ids: I, k: usize, seed: u64) -> Result<FoldAssignment>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut ids: Vec<&String> = patient_ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    check_fold_count(k, ids.len())?;
    ids.shuffle(&mut rng::seeded(seed));
    let mapping = ids.into_iter().enumerate().map(|(i, p)| (p.clone(), i % k)).collect();
    Ok(FoldAssignment { k, mapping })
}

/// Like [`make_folds`], but deals each stratum in turn so that strata are
/// spread across folds. The deal counter runs across strata, which keeps
/// fold sizes within one of each other.
pub fn make_stratified_folds(strata: &BTreeMap<String, usize>, k: usize, seed: u64) -> Result<FoldAssignment> {
    check_fold_count(k, strata.len())?;
    let mut groups: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (p, &s) in strata {
        groups.entry(s).or_default().push(p);
    }
    let mut rng = rng::seeded(seed);
    let mut mapping = BTreeMap::new();
    let mut deal = 0usize;
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        for p in members {
            mapping.insert(p.clone(), deal % k);
            deal += 1;
        }
    }
    Ok(FoldAssignment { k, mapping })
}

/// Records whose patient is in `patients`. An empty selection yields an empty
/// dataset; consumers that need data reject it themselves.
pub fn filter_by_patients(dataset: &Dataset, patients: &BTreeSet<String>) -> Result<Dataset> {
    let known = dataset.patients();
    if let Some(missing) = patients.iter().find(|p| !known.contains(*p)) {
        return Err(FslError::UnknownPatient(missing.clone()));
    }
    Ok(Dataset {
        name: dataset.name.clone(),
        dim: dataset.dim,
        num_classes: dataset.num_classes,
        records: dataset.records.iter().filter(|r| patients.contains(&r.patient_id)).cloned().collect(),
    })
}
