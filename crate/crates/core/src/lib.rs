//! Prompt-enhanced node-level inference attacks against graph neural networks.
//!
//! The pipeline pre-trains a prompt encoder, trains victim and shadow GNNs,
//! collects their posteriors into attack datasets and fits a disentangled
//! attack head on top. Defenses perturb posteriors or query-time structure.

pub mod attack_data;
pub mod autodiff;
pub mod defense;
pub mod disentangle;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod persist;
pub mod pretrain;
pub mod victim;

pub use error::{Error, Result};
