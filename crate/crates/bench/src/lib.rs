//! Fixtures shared by the benchmarks.

use fedsim_core::data::build_paired_clients;
use fedsim_core::{ClientPartition, ExperimentConfig};

/// Default experiment shape with a configurable round count.
pub fn bench_config(rounds: u64) -> ExperimentConfig {
    ExperimentConfig {
        rounds,
        ..ExperimentConfig::default()
    }
}

pub fn default_partitions() -> Vec<ClientPartition> {
    build_paired_clients(&ExperimentConfig::default()).expect("default config is valid")
}
