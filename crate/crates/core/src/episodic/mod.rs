//! Patient-disjoint episodes, training and evaluation loops, and
//! patient-level cross-validation.

pub mod cv;
pub mod report;
pub mod sampler;
pub mod training;

pub use cv::{ablate_patients, cross_validate, cross_validate_transfer, Protocol};
pub use report::{config_hash, ReportConfig, RunReport, SeedRecord};
pub use sampler::{sample_episode, Episode, EpisodeConfig, EpisodeSampler};
pub use training::{evaluate, evaluate_accuracies, train, TrainConfig, TrainOutcome};
