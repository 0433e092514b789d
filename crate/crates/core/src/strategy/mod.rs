//! Aggregation strategies behind a common round interface.
//!
//! A round is split in two halves so the engine can route updates through a
//! transport in between: [`Strategy::client_updates`] runs on the clients,
//! [`Strategy::apply`] consumes the collected updates.

pub mod aggregate;
pub mod baselines;
pub mod fedsmart;

use rayon::prelude::*;

pub use aggregate::{fedavg_aggregate, median, mix_deltas};
pub use baselines::{
    centralized_train, fedsgd_round, loadaboost_gate, loadaboost_round, local_only_round,
    Centralized, FedAvg, FedSgd, LoAdaBoost, LocalOnly,
};
pub use fedsmart::{
    candidate_accuracies, fedsmart_client_step, fedsmart_round, fedsmart_weight_update, ClientStep,
    FedSmart, PeerWeights, RoundAccuracies,
};

use crate::config::StrategyKind;
use crate::data::ClientPartition;
use crate::error::{contract, Error, Result};
use crate::model::{local_train, ClientUpdate, ModelParams, TrainParams};

/// Hyperparameters carried in the strategy state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    /// Peer-weight step size (FedSmart only).
    pub eta: f64,
    pub train: TrainParams,
}

/// Everything a strategy carries from one round to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyState {
    /// One model per client for personalized strategies, a single global
    /// model otherwise.
    pub models: Vec<ModelParams>,
    pub peer_weights: Option<Vec<PeerWeights>>,
    pub round: u64,
    pub hyper: Hyper,
}

impl StrategyState {
    /// The model client `client_id` currently uses.
    pub fn model_for(&self, client_id: usize) -> &ModelParams {
        if self.models.len() == 1 {
            &self.models[0]
        } else {
            &self.models[client_id]
        }
    }

    /// Row `i` is client `i`'s peer weights; strategies without peer weights
    /// report uniform rows.
    pub fn weight_matrix(&self, n_clients: usize) -> Vec<Vec<f64>> {
        match &self.peer_weights {
            Some(rows) => rows.iter().map(|r| r.weights.clone()).collect(),
            None => vec![vec![1.0 / n_clients as f64; n_clients]; n_clients],
        }
    }

    fn advanced(&self, models: Vec<ModelParams>) -> Self {
        Self {
            models,
            peer_weights: self.peer_weights.clone(),
            round: self.round + 1,
            hyper: self.hyper,
        }
    }
}

pub trait Strategy: Send + Sync {
    fn kind(&self) -> StrategyKind;

    /// Whether updates are exchanged between clients and server.
    fn communicates(&self) -> bool {
        true
    }

    fn init_state(&self, n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState;

    /// Client-side half of a round. `seeds[i]` drives client `i`'s training.
    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>>;

    /// Consumes one update per client (any order) and advances the round.
    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        partitions: &[ClientPartition],
    ) -> Result<StrategyState>;
}

pub fn strategy_for(kind: StrategyKind) -> Box<dyn Strategy> {
    match kind {
        StrategyKind::FedSmart => Box::new(FedSmart),
        StrategyKind::FedAvg => Box::new(FedAvg),
        StrategyKind::FedSgd => Box::new(FedSgd),
        StrategyKind::LoAdaBoost => Box::new(LoAdaBoost),
        StrategyKind::Local => Box::new(LocalOnly),
        StrategyKind::Centralized => Box::new(Centralized),
    }
}

/// Checks that `updates` holds exactly one update per client and returns
/// them in client-id order.
pub fn check_round_updates(
    round: u64,
    n_clients: usize,
    updates: &[ClientUpdate],
) -> Result<Vec<ClientUpdate>> {
    let mut slots: Vec<Option<&ClientUpdate>> = vec![None; n_clients];
    for u in updates {
        let slot = slots.get_mut(u.client_id).ok_or_else(|| Error::Protocol {
            round,
            detail: format!("update from unknown client {}", u.client_id),
        })?;
        if slot.replace(u).is_some() {
            return Err(Error::Protocol {
                round,
                detail: format!("duplicate update from client {}", u.client_id),
            });
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(id, slot)| {
            slot.cloned().ok_or_else(|| Error::Protocol {
                round,
                detail: format!("missing update from client {id}"),
            })
        })
        .collect()
}

fn check_seeds(partitions: &[ClientPartition], seeds: &[u64]) -> Result<()> {
    if seeds.len() != partitions.len() {
        return Err(contract(format!(
            "{} seeds for {} clients",
            seeds.len(),
            partitions.len()
        )));
    }
    Ok(())
}

/// Every client runs local SGD from the model it currently uses.
pub(crate) fn train_each(
    state: &StrategyState,
    partitions: &[ClientPartition],
    seeds: &[u64],
) -> Result<Vec<ClientUpdate>> {
    check_seeds(partitions, seeds)?;
    partitions
        .par_iter()
        .zip(seeds)
        .map(|(p, &seed)| {
            local_train(
                p.client_id,
                state.model_for(p.client_id),
                &p.train,
                &state.hyper.train,
                seed,
            )
        })
        .collect()
}
