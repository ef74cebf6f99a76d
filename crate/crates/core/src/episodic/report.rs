use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::sampler::EpisodeConfig;
use super::training::TrainConfig;
use crate::heads::{HeadKind, HeadOptions};
use crate::stats::Quartiles;

/// Everything about a run's setup that influences its numbers, plus the
/// held-out patients for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub hash: String,
    pub episode: EpisodeConfig,
    pub train: TrainConfig,
    pub head_options: HeadOptions,
    pub folds: Option<usize>,
    pub held_out_patients: Vec<String>,
}

impl ReportConfig {
    pub fn new(
        episode: EpisodeConfig,
        train: TrainConfig,
        head_options: HeadOptions,
        folds: Option<usize>,
        held_out_patients: Vec<String>,
    ) -> Self {
        let hash = config_hash(&episode, &train, &head_options, folds);
        Self { hash, episode, train, head_options, folds, held_out_patients }
    }
}

/// First 16 hex digits of SHA-256 over the canonical JSON of the settings.
pub fn config_hash(
    episode: &EpisodeConfig,
    train: &TrainConfig,
    head_options: &HeadOptions,
    folds: Option<usize>,
) -> String {
    let canonical = serde_json::json!({
        "episode": episode,
        "train": train,
        "head_options": head_options,
        "folds": folds,
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRecord {
    pub base: u64,
    /// Fold-assignment seed, for cross-validated runs.
    pub folds: Option<u64>,
    /// Seed from which this run's training and evaluation streams derive.
    pub run: u64,
}

/// Result of evaluating one head on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub head: HeadKind,
    pub config: ReportConfig,
    pub seeds: SeedRecord,
    pub fold_id: Option<usize>,
    pub episode_accuracies: Vec<f64>,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub train_dataset: String,
    pub eval_dataset: String,
}

impl RunReport {
    pub fn new(
        head: HeadKind,
        config: ReportConfig,
        seeds: SeedRecord,
        fold_id: Option<usize>,
        episode_accuracies: Vec<f64>,
        train_dataset: String,
        eval_dataset: String,
    ) -> Self {
        let q = Quartiles::of(&episode_accuracies).expect("at least one evaluation episode");
        Self {
            head,
            config,
            seeds,
            fold_id,
            episode_accuracies,
            median: q.median,
            q1: q.q1,
            q3: q.q3,
            train_dataset,
            eval_dataset,
        }
    }

    /// True when the stored aggregates follow from the stored accuracies.
    pub fn is_consistent(&self) -> bool {
        let Some(q) = Quartiles::of(&self.episode_accuracies) else {
            return false;
        };
        self.episode_accuracies.iter().all(|a| (0.0..=1.0).contains(a))
            && q.median == self.median
            && q.q1 == self.q1
            && q.q3 == self.q3
    }
}
