//! Deterministic simulator for federated learning with clustered, drifting clients.

pub mod aggregation;
pub mod baselines;
pub mod cli;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evocluster;
pub mod metrics;
pub mod numerics;
pub mod orchestrator;
pub mod taskmodel;

pub use error::{Error, Result};
