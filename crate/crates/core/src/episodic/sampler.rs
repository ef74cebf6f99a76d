use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::Dataset;
use crate::diffcore::Matrix;
use crate::error::{FslError, Result};

/// Limit on enumerated (class set, query patients) candidates.
const MAX_CANDIDATES: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub way: usize,
    /// Support frames per class.
    pub shot: usize,
    /// Query frames per class, when that many are available.
    pub query: usize,
    /// Patients held out as the query side of each episode.
    pub query_patients: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { way: 2, shot: 5, query: 10, query_patients: 1 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(FslError::InvalidSpec { field, reason: reason.into() });
        if self.way < 2 {
            return bad("way", "must be >= 2");
        }
        if self.shot < 1 {
            return bad("shot", "must be >= 1");
        }
        if self.query < 1 {
            return bad("query", "must be >= 1");
        }
        if self.query_patients < 1 {
            return bad("query_patients", "must be >= 1");
        }
        Ok(())
    }
}

/// One few-shot task. Labels are episode-local (`0..way`); `classes[c]` is
/// the dataset label behind local class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub classes: Vec<usize>,
    pub support: Matrix,
    pub support_labels: Vec<usize>,
    pub query: Matrix,
    pub query_labels: Vec<usize>,
    pub support_patients: BTreeSet<String>,
    pub query_patients: BTreeSet<String>,
}

fn stack(rows: &[Vec<f64>], dim: usize) -> Matrix {
    Matrix::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

impl Episode {
    /// Builds an episode from raw vectors without patient bookkeeping.
    pub fn from_parts(support: Vec<(Vec<f64>, usize)>, query: Vec<(Vec<f64>, usize)>, way: usize) -> Self {
        let dim = support.first().map_or(0, |(v, _)| v.len());
        let (sv, sl): (Vec<_>, Vec<_>) = support.into_iter().unzip();
        let (qv, ql): (Vec<_>, Vec<_>) = query.into_iter().unzip();
        Self {
            way,
            classes: (0..way).collect(),
            support: stack(&sv, dim),
            support_labels: sl,
            query: stack(&qv, dim),
            query_labels: ql,
            support_patients: BTreeSet::new(),
            query_patients: BTreeSet::new(),
        }
    }
}

fn combinations(n: usize, k: usize, limit: usize) -> Result<Vec<Vec<usize>>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, limit: usize) -> bool {
        if cur.len() == k {
            out.push(cur.clone());
            return out.len() <= limit;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            if !go(i + 1, n, k, cur, out, limit) {
                return false;
            }
            cur.pop();
        }
        true
    }
    let mut out = Vec::new();
    if k <= n && !go(0, n, k, &mut Vec::with_capacity(k), &mut out, limit) {
        return Err(FslError::InvalidConfig(format!("more than {limit} episode partitions to enumerate")));
    }
    Ok(out)
}

/// Precomputed frame index and feasible patient partitions for one dataset.
///
/// A partition picks `query_patients` patients from the query pool; every
/// other patient of the dataset forms the support pool. It is feasible when
/// each episode class has at least one query frame and `shot` support
/// frames on its side. [`EpisodeSampler::sample`] draws a feasible partition
/// uniformly, then frames without replacement.
#[derive(Debug, Clone)]
pub struct EpisodeSampler<'a> {
    dataset: &'a Dataset,
    cfg: EpisodeConfig,
    /// `frames[patient][label]` = record indices
    frames: Vec<Vec<Vec<usize>>>,
    candidates: Vec<(Vec<usize>, Vec<usize>)>,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(dataset: &'a Dataset, cfg: EpisodeConfig) -> Result<Self> {
        Self::with_query_pool(dataset, cfg, &dataset.patients())
    }

    pub fn with_query_pool(dataset: &'a Dataset, cfg: EpisodeConfig, pool: &BTreeSet<String>) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(FslError::InfeasibleEpisode(format!("dataset `{}` is empty", dataset.name)));
        }
        if cfg.way > dataset.num_classes {
            return Err(FslError::InfeasibleEpisode(format!(
                "way {} exceeds the {} classes of `{}`",
                cfg.way, dataset.num_classes, dataset.name
            )));
        }
        let patients: Vec<String> = dataset.patients().into_iter().collect();
        let mut frames = vec![vec![Vec::new(); dataset.num_classes]; patients.len()];
        for (i, r) in dataset.records.iter().enumerate() {
            let p = patients.binary_search(&r.patient_id).expect("patient listed");
            frames[p][r.label].push(i);
        }
        let pool_idx: Vec<usize> =
            patients.iter().enumerate().filter(|(_, p)| pool.contains(*p)).map(|(i, _)| i).collect();
        if let Some(p) = pool.iter().find(|p| patients.binary_search(p).is_err()) {
            return Err(FslError::UnknownPatient(p.clone()));
        }

        let class_sets = combinations(dataset.num_classes, cfg.way, MAX_CANDIDATES)?;
        let query_sets = combinations(pool_idx.len(), cfg.query_patients, MAX_CANDIDATES)?;
        if class_sets.len().saturating_mul(query_sets.len()) > MAX_CANDIDATES {
            return Err(FslError::InvalidConfig("too many episode partitions to enumerate".into()));
        }
        let totals: Vec<usize> = (0..dataset.num_classes).map(|c| frames.iter().map(|f| f[c].len()).sum()).collect();
        let mut candidates = Vec::new();
        for qs in &query_sets {
            let q: Vec<usize> = qs.iter().map(|&i| pool_idx[i]).collect();
            for classes in &class_sets {
                let ok = classes.iter().all(|&c| {
                    let on_query: usize = q.iter().map(|&p| frames[p][c].len()).sum();
                    on_query >= 1 && totals[c] - on_query >= cfg.shot
                });
                if ok {
                    candidates.push((classes.clone(), q.clone()));
                }
            }
        }
        if candidates.is_empty() {
            return Err(FslError::InfeasibleEpisode(format!(
                "no patient partition of `{}` gives {} support frames per class and a query frame per class \
                 from disjoint patients",
                dataset.name, cfg.shot
            )));
        }
        Ok(Self { dataset, cfg, frames, candidates })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    pub fn feasible_partitions(&self) -> usize {
        self.candidates.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Episode {
        let (classes, query_side) = &self.candidates[rng.random_range(0..self.candidates.len())];
        let dim = self.dataset.dim;
        let is_query = |p: usize| query_side.contains(&p);

        let mut support = Vec::with_capacity(self.cfg.way * self.cfg.shot);
        let mut support_labels = Vec::with_capacity(support.capacity());
        let mut query = Vec::new();
        let mut query_labels = Vec::new();
        let mut support_patients = BTreeSet::new();
        let mut query_patients = BTreeSet::new();

        for (local, &c) in classes.iter().enumerate() {
            let mut q_pool = Vec::new();
            let mut s_pool = Vec::new();
            for (p, per_class) in self.frames.iter().enumerate() {
                let side = if is_query(p) { &mut q_pool } else { &mut s_pool };
                side.extend_from_slice(&per_class[c]);
            }

            for i in index::sample(rng, s_pool.len(), self.cfg.shot) {
                let r = &self.dataset.records[s_pool[i]];
                support.push(r.vector.iter().map(|&v| v as f64).collect::<Vec<f64>>());
                support_labels.push(local);
                support_patients.insert(r.patient_id.clone());
            }
            let take = self.cfg.query.min(q_pool.len());
            for i in index::sample(rng, q_pool.len(), take) {
                let r = &self.dataset.records[q_pool[i]];
                query.push(r.vector.iter().map(|&v| v as f64).collect::<Vec<f64>>());
                query_labels.push(local);
                query_patients.insert(r.patient_id.clone());
            }
        }
        Episode {
            way: self.cfg.way,
            classes: classes.clone(),
            support: stack(&support, dim),
            support_labels,
            query: stack(&query, dim),
            query_labels,
            support_patients,
            query_patients,
        }
    }
}

/// One-off convenience around [`EpisodeSampler`].
pub fn sample_episode<R: Rng>(dataset: &Dataset, cfg: EpisodeConfig, rng: &mut R) -> Result<Episode> {
    Ok(EpisodeSampler::new(dataset, cfg)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::EmbeddingRecord;
    use crate::rng;

    fn dataset(spec: &[(&str, usize, usize)]) -> Dataset {
        // (patient, benign frames, malignant frames)
        let mut records = Vec::new();
        for &(p, b, m) in spec {
            for (label, n) in [(0, b), (1, m)] {
                for f in 0..n {
                    records.push(EmbeddingRecord {
                        patient_id: p.into(),
                        sequence_id: format!("s{label}"),
                        frame_index: f as u32,
                        label,
                        vector: vec![label as f32, f as f32],
                    });
                }
            }
        }
        Dataset::new("t", 2, 2, records).unwrap()
    }

    #[test]
    fn four_complete_patients() {
        let ds = dataset(&[("A", 15, 15), ("B", 15, 15), ("C", 15, 15), ("D", 15, 15)]);
        let sampler = EpisodeSampler::new(&ds, EpisodeConfig::default()).unwrap();
        assert_eq!(sampler.feasible_partitions(), 4);
        let mut r = rng::seeded(0);
        for _ in 0..100 {
            let ep = sampler.sample(&mut r);
            assert_eq!(ep.support.nrows(), 10);
            assert_eq!(ep.query.nrows(), 20);
            assert!(ep.support_patients.is_disjoint(&ep.query_patients));
            assert_eq!(ep.query_patients.len(), 1);
        }
    }

    #[test]
    fn single_malignant_patient_is_infeasible() {
        let ds = dataset(&[("A", 20, 20), ("B", 20, 0), ("C", 20, 0)]);
        let err = EpisodeSampler::new(&ds, EpisodeConfig::default()).unwrap_err();
        assert!(matches!(err, FslError::InfeasibleEpisode(_)));
    }

    #[test]
    fn scarce_query_class_uses_what_exists() {
        let ds = dataset(&[("A", 20, 3), ("B", 20, 20), ("C", 20, 20)]);
        let sampler =
            EpisodeSampler::with_query_pool(&ds, EpisodeConfig::default(), &["A".to_string()].into()).unwrap();
        let ep = sampler.sample(&mut rng::seeded(1));
        let malignant = ep.query_labels.iter().filter(|&&l| l == 1).count();
        assert_eq!(malignant, 3);
        assert_eq!(ep.query_labels.len(), 13);
    }

    #[test]
    fn class_incomplete_patients_take_either_role() {
        // A and B hold no malignant frames; they can still be query patients
        // only if the query side has a malignant frame, so only C and D qualify
        let ds = dataset(&[("A", 10, 0), ("B", 10, 0), ("C", 10, 10), ("D", 10, 10)]);
        let sampler = EpisodeSampler::new(&ds, EpisodeConfig::default()).unwrap();
        assert_eq!(sampler.feasible_partitions(), 2);
        let two = EpisodeConfig { query_patients: 2, ..Default::default() };
        // {A,C}, {A,D}, {B,C}, {B,D} are feasible; {C,D} leaves no malignant support
        assert_eq!(EpisodeSampler::new(&ds, two).unwrap().feasible_partitions(), 4);
    }

    #[test]
    fn way_smaller_than_class_count() {
        let mut records = Vec::new();
        for p in ["A", "B", "C"] {
            for label in 0..3 {
                for f in 0..6 {
                    records.push(EmbeddingRecord {
                        patient_id: p.into(),
                        sequence_id: format!("s{label}"),
                        frame_index: f,
                        label,
                        vector: vec![label as f32],
                    });
                }
            }
        }
        let ds = Dataset::new("three", 1, 3, records).unwrap();
        let cfg = EpisodeConfig { way: 2, shot: 2, query: 2, query_patients: 1 };
        let sampler = EpisodeSampler::new(&ds, cfg).unwrap();
        assert_eq!(sampler.feasible_partitions(), 9);
        let ep = sampler.sample(&mut rng::seeded(5));
        for (row, &l) in ep.support.rows().into_iter().zip(&ep.support_labels) {
            assert_eq!(row[0] as usize, ep.classes[l]);
        }
    }

    #[test]
    fn bad_config_rejected() {
        let ds = dataset(&[("A", 5, 5)]);
        let cfg = EpisodeConfig { way: 1, ..Default::default() };
        assert!(matches!(EpisodeSampler::new(&ds, cfg), Err(FslError::InvalidSpec { field: "way", .. })));
    }
}
