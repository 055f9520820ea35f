//! Deterministic federated-learning simulator.
//!
//! Implements global-update-guided local training (FedGG) with a
//! model-cosine loss and adaptive loss weights, next to FedAvg, FedProx, and
//! SCAFFOLD baselines, over Dirichlet non-IID partitions of synthetic or
//! CSV datasets. Every random draw derives from a master seed, so a config
//! fully determines the metrics a run produces.

pub mod data;
pub mod error;
pub mod model;
pub mod params;
pub mod seeding;
pub mod strategies;

pub use error::{Error, Result};
pub use params::ParamVector;
