//! Desk-scale feature-distillation lab for compact vision transformers.
//!
//! The crate bundles a small reverse-mode tensor engine, a configurable
//! patch-token encoder with feature and attention taps, the distillation
//! losses (shallow-layer mimicking, masked deep-layer generation, logit
//! KD), three generative blocks, a trainer, dataset/checkpoint IO, and a
//! batch CLI for reproducible experiments.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod tape;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod genblocks;
pub mod distill;
pub mod reference;
pub mod data;
pub mod checkpoint;
pub mod export;
pub mod optim;
pub mod trainer;
pub mod config;
pub mod commands;

pub use error::{Error, Result};
pub use tape::Tape;
pub use tensor::Tensor;
