//! Episodic few-shot classification over patient-grouped frame embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`datamodel`]: records, datasets, patient-level folds.
//! - [`embedio`]: the `.fsle` binary and CSV formats plus a synthetic generator.
//! - [`imageprep`]: field-of-view cropping, augmentation, resizing and a
//!   deterministic patch featurizer.
//! - [`diffcore`]: a closed-set reverse-mode tape and Adam.
//! - [`heads`]: prototypical, SimpleShot, relation and matching heads.
//! - [`episodic`]: patient-disjoint sampling, training, evaluation, cross-validation.
//! - [`experiment`]: JSON configs, run directories, summary tables and PCA export.
//!
//! Data-parallel loops (evaluation episodes, folds, repetitions) go through
//! [`par`], which uses rayon when the `parallel` feature is on.

pub mod datamodel;
pub mod diffcore;
pub mod embedio;
pub mod episodic;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod imageprep;
pub mod par;
pub mod rng;
pub mod stats;

pub use error::{ErrorKind, FslError, Result};
