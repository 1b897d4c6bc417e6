//! Reptile meta-learning over a grid of task-language pairs (TLPs).
//!
//! The crate covers the whole experiment: the task x language grid and its
//! sampling fractions, synthetic datasets with shallow (token-level) and
//! deep (sequence-level) tasks, a shared-encoder multi-head model with exact
//! gradients, temperature and MultiDDS sampling over TLPs, the Reptile
//! meta-training loop, fine-tuning/evaluation with the per-TLP and
//! multi-task baselines, and the configuration-driven experiment runner.

pub mod config;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod grid;
pub mod meta;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
