//! Reverse-mode differentiation over a fixed operator set, Adam, and a
//! finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_extrapolated, GradCheck};
pub use tape::{sigmoid, Gradients, Matrix, NodeId, Tape};
