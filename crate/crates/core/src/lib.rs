//! Deterministic federated-learning simulator.
//!
//! Clients hold synthetic clinical-style datasets, train a logistic model
//! locally and exchange parameter updates each round. Besides FedAvg-style
//! global baselines, the simulator implements performance-weighted
//! personalized aggregation: every client scores each peer's update on a
//! private validation share and learns how much to trust it.

pub mod acceptance;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod report;
pub mod seed;
pub mod strategy;
pub mod transport;

pub use config::{ExperimentConfig, Heterogeneity, StrategyKind, TransportKind, FEATURE_DIM};
pub use data::{ClientPartition, DistributionSpec};
pub use engine::{run_experiment, run_sweep, RoundRecord};
pub use error::{Error, Result};
pub use model::{ClientUpdate, Example, ModelParams, TrainParams};
pub use report::{ReportBundle, Summary};
pub use strategy::{PeerWeights, RoundAccuracies, Strategy, StrategyState};
