use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::report::{ReportConfig, RunReport, SeedRecord};
use super::sampler::EpisodeConfig;
use super::training::{evaluate_accuracies, train, TrainConfig};
use crate::datamodel::{filter_by_patients, make_folds, make_stratified_folds, Dataset, FoldAssignment, MALIGNANT};
use crate::error::{FslError, Result};
use crate::heads::{HeadKind, HeadOptions};
use crate::par::{self, Execution};
use crate::rng;

const FOLD_SALT: u64 = 0x666f_6c64;

/// Settings shared by every fold of a cross-validated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub head_options: HeadOptions,
    pub folds: usize,
    /// Spread malignant and benign-only patients evenly across folds.
    pub stratify: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig::default(),
            train: TrainConfig::default(),
            head_options: HeadOptions::default(),
            folds: 5,
            stratify: false,
        }
    }
}

impl Protocol {
    pub fn fold_seed(&self) -> u64 {
        rng::mix(self.train.seed, FOLD_SALT)
    }

    pub fn run_seed(&self, fold: usize) -> u64 {
        rng::mix(self.train.seed, fold as u64 + 1)
    }

    pub fn assign_folds(&self, dataset: &Dataset) -> Result<FoldAssignment> {
        let patients = dataset.patients();
        if self.stratify {
            let malignant = dataset.patients_with_label(MALIGNANT);
            let strata: BTreeMap<String, usize> = patients
                .into_iter()
                .map(|p| {
                    let s = malignant.contains(&p) as usize;
                    (p, s)
                })
                .collect();
            make_stratified_folds(&strata, self.folds, self.fold_seed())
        } else {
            make_folds(&patients, self.folds, self.fold_seed())
        }
    }
}

/// Patient-level k-fold cross-validation on one dataset.
pub fn cross_validate(
    head: HeadKind,
    dataset: &Dataset,
    protocol: &Protocol,
    exec: Execution,
) -> Result<Vec<RunReport>> {
    cross_validate_transfer(head, dataset, dataset, protocol, exec)
}

/// Cross-validation where the adapter trains on `train_source` and is
/// evaluated on `eval`. Folds partition the patients of `eval`; fold
/// patients are removed from `train_source` before training, and only fold
/// patients serve as evaluation query patients.
///
/// With `train_source == eval` this is ordinary cross-validation. An
/// augmented copy of `eval` as `train_source` gives augmented training.
pub fn cross_validate_transfer(
    head: HeadKind,
    train_source: &Dataset,
    eval: &Dataset,
    protocol: &Protocol,
    exec: Execution,
) -> Result<Vec<RunReport>> {
    protocol.episode.validate()?;
    protocol.train.validate()?;
    let folds = protocol.assign_folds(eval)?;
    let train_patients = train_source.patients();
    par::try_map_indexed(exec, folds.k, |fold| {
        let held_out = folds.fold(fold);
        let keep: BTreeSet<String> = train_patients.difference(&held_out).cloned().collect();
        let train_data = filter_by_patients(train_source, &keep)?;
        let cfg = TrainConfig { seed: protocol.run_seed(fold), ..protocol.train };
        let outcome = train(head, &train_data, &cfg, &protocol.episode, protocol.head_options)?;
        let accs = evaluate_accuracies(&outcome.model, eval, &cfg, &protocol.episode, &held_out, exec)?;
        let config = ReportConfig::new(
            protocol.episode,
            protocol.train,
            protocol.head_options,
            Some(folds.k),
            held_out.into_iter().collect(),
        );
        let seeds = SeedRecord { base: protocol.train.seed, folds: Some(protocol.fold_seed()), run: cfg.seed };
        Ok(RunReport::new(head, config, seeds, Some(fold), accs, train_source.name.clone(), eval.name.clone()))
    })
}

/// Seeded uniform choice of `n` patients, keeping all of their frames.
pub fn ablate_patients(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let patients: Vec<String> = dataset.patients().into_iter().collect();
    if n > patients.len() {
        return Err(FslError::NotEnoughPatients { requested: n, available: patients.len() });
    }
    let chosen: BTreeSet<String> =
        index::sample(&mut rng::seeded(seed), patients.len(), n).into_iter().map(|i| patients[i].clone()).collect();
    filter_by_patients(dataset, &chosen)
}
