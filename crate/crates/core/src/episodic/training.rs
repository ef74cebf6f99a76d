use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::report::{ReportConfig, RunReport, SeedRecord};
use super::sampler::{EpisodeConfig, EpisodeSampler};
use crate::datamodel::Dataset;
use crate::diffcore::{adam_step, AdamConfig, AdamState};
use crate::error::{FslError, Result};
use crate::heads::{episode_loss, HeadKind, HeadOptions, Model};
use crate::par::{self, Execution};
use crate::rng;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00;
const EVAL_STREAM: u64 = 0x6576_616c_0000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Train on the augmented variant of the training data.
    pub augment: bool,
    /// Adapter output width; `None` keeps the input width.
    pub adapter_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            train_episodes: 500,
            eval_episodes: 500,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            seed: 0,
            augment: false,
            adapter_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: &str| Err(FslError::InvalidSpec { field, reason: reason.into() });
        if self.eval_episodes < 1 {
            return bad("eval_episodes", "must be >= 1");
        }
        // zero is accepted so that a run can be replayed without updates
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta", "betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon", "must be > 0");
        }
        if self.adapter_dim == Some(0) {
            return bad("adapter_dim", "must be >= 1");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Loss of every training episode, before that episode's update.
    pub losses: Vec<f64>,
}

/// Episodic training: sample, loss, one Adam step, `cfg.train_episodes` times.
/// Episode `i` uses random stream `i`, so the history is reproducible.
pub fn train(
    head: HeadKind,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ecfg: &EpisodeConfig,
    options: HeadOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = EpisodeSampler::new(dataset, *ecfg)?;
    let adapter_dim = cfg.adapter_dim.unwrap_or(dataset.dim);
    let mut model = Model::new(head, dataset.dim, adapter_dim, options);
    let mut params = model.params();
    let mut state = AdamState::new(cfg.adam(), &params);
    let seed = rng::mix(cfg.seed, TRAIN_STREAM);
    let mut losses = Vec::with_capacity(cfg.train_episodes);
    for i in 0..cfg.train_episodes {
        let episode = sampler.sample(&mut rng::stream(seed, i as u64));
        let (loss, grads) = episode_loss(&model, &episode)?;
        losses.push(loss);
        adam_step(&mut params, &grads, &mut state)?;
        model.set_params(params.clone());
    }
    Ok(TrainOutcome { model, losses })
}

/// Per-episode query accuracy over `cfg.eval_episodes` episodes whose query
/// patients come from `query_pool`. Parameters are read-only.
pub fn evaluate_accuracies(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ecfg: &EpisodeConfig,
    query_pool: &BTreeSet<String>,
    exec: Execution,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let sampler = EpisodeSampler::with_query_pool(dataset, *ecfg, query_pool)?;
    let seed = rng::mix(cfg.seed, EVAL_STREAM);
    par::try_map_indexed(exec, cfg.eval_episodes, |i| {
        let episode = sampler.sample(&mut rng::stream(seed, i as u64));
        model.accuracy(&episode)
    })
}

/// Evaluates on every patient of `dataset` as a potential query patient.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ecfg: &EpisodeConfig,
    exec: Execution,
) -> Result<RunReport> {
    let accs = evaluate_accuracies(model, dataset, cfg, ecfg, &dataset.patients(), exec)?;
    let config = ReportConfig::new(*ecfg, *cfg, model.options, None, Vec::new());
    let seeds = SeedRecord { base: cfg.seed, folds: None, run: cfg.seed };
    Ok(RunReport::new(model.head, config, seeds, None, accs, dataset.name.clone(), dataset.name.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedio::{synth_dataset, SynthSpec};

    fn data(sep: f64, noise: f64, psigma: f64) -> Dataset {
        let spec = SynthSpec {
            num_patients: 6,
            frames_per_patient_per_class: 20,
            dim: 8,
            class_separation: sep,
            patient_sigma: psigma,
            noise_sigma: noise,
            malignant_patient_fraction: 1.0,
        };
        synth_dataset(&spec, 2).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { train_episodes: 30, eval_episodes: 40, ..Default::default() }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let ds = data(2.0, 1.0, 0.5);
        for head in HeadKind::ALL {
            let cfg = TrainConfig { learning_rate: 0.0, ..quick() };
            let out = train(head, &ds, &cfg, &EpisodeConfig::default(), HeadOptions::default()).unwrap();
            let fresh = Model::new(head, ds.dim, ds.dim, HeadOptions::default());
            assert_eq!(out.model, fresh, "{head}");
        }
    }

    #[test]
    fn same_seed_same_history() {
        let ds = data(2.0, 1.0, 0.5);
        for head in HeadKind::ALL {
            let a = train(head, &ds, &quick(), &EpisodeConfig::default(), HeadOptions::default()).unwrap();
            let b = train(head, &ds, &quick(), &EpisodeConfig::default(), HeadOptions::default()).unwrap();
            assert_eq!(a.losses, b.losses);
            assert_eq!(a.model, b.model);
        }
    }

    #[test]
    fn evaluation_leaves_parameters_alone() {
        let ds = data(2.0, 1.0, 0.5);
        let out =
            train(HeadKind::RelationNet, &ds, &quick(), &EpisodeConfig::default(), HeadOptions::default()).unwrap();
        let before = out.model.clone();
        evaluate(&out.model, &ds, &quick(), &EpisodeConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(out.model, before);
    }

    #[test]
    fn parallel_and_sequential_evaluation_agree() {
        let ds = data(1.0, 1.0, 0.5);
        let m = Model::new(HeadKind::MatchingNet, ds.dim, ds.dim, HeadOptions::default());
        let a = evaluate(&m, &ds, &quick(), &EpisodeConfig::default(), Execution::Sequential).unwrap();
        let b = evaluate(&m, &ds, &quick(), &EpisodeConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_protonet_is_perfect() {
        let ds = data(10.0, 0.1, 0.0);
        let m = Model::new(HeadKind::ProtoNet, ds.dim, ds.dim, HeadOptions::default());
        let r = evaluate(&m, &ds, &quick(), &EpisodeConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(r.median, 1.0);
    }

    #[test]
    fn training_reduces_loss() {
        let ds = data(1.0, 0.1, 0.01);
        for head in HeadKind::ALL {
            let cfg = TrainConfig { train_episodes: 500, ..Default::default() };
            let out = train(head, &ds, &cfg, &EpisodeConfig::default(), HeadOptions::default()).unwrap();
            let first: f64 = out.losses[..50].iter().sum::<f64>() / 50.0;
            let last: f64 = out.losses[450..].iter().sum::<f64>() / 50.0;
            assert!(last < first, "{head}: {first} -> {last}");
        }
    }
}
