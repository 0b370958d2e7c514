//! Multi-lesion graph learning for treatment-response classification.
//!
//! A patient is represented as a fully connected weighted graph over their
//! lesions (node features = imaging descriptors, edge weights from a
//! distance kernel), fused with a per-patient clinical vector through
//! cross-attention blocks. The crate bundles the model itself, the
//! comparison baselines, a reverse-mode autodiff core they are built on,
//! the evaluation protocol (repeated stratified splits, balanced ROC AUC
//! scoring, grid search, significance tests), and a synthetic cohort
//! generator with a planted cross-modal signal.

pub mod autodiff;
pub mod baselines;
pub mod cli;
pub mod cohort;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod protocol;
pub mod rng;
pub mod synth;

pub use matrix::Matrix;
