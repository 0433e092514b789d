//! Comparison strategies: FedAvg, FedSGD, a loss-gated LoAdaBoost variant,
//! local-only training and centralized training on pooled data.

use rayon::prelude::*;

use super::aggregate::{fedavg_aggregate, median};
use super::{check_round_updates, check_seeds, train_each, Hyper, Strategy, StrategyState};
use crate::config::StrategyKind;
use crate::data::ClientPartition;
use crate::error::{contract, Error, Result};
use crate::model::{
    gradient, local_train, loss, sgd_step, sgd_train, ClientUpdate, Example, ModelParams,
    TrainParams,
};
use crate::seed::{derive_seed, BOOST_STREAM};

fn global_state(init: &ModelParams, hyper: Hyper) -> StrategyState {
    StrategyState {
        models: vec![init.clone()],
        peer_weights: None,
        round: 0,
        hyper,
    }
}

fn per_client_state(n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
    StrategyState {
        models: vec![init.clone(); n_clients],
        peer_weights: None,
        round: 0,
        hyper,
    }
}

fn apply_mean_delta(
    state: &StrategyState,
    updates: &[ClientUpdate],
    partitions: &[ClientPartition],
) -> Result<StrategyState> {
    let updates = check_round_updates(state.round, partitions.len(), updates)?;
    let mean = fedavg_aggregate(&updates)?;
    Ok(state.advanced(vec![state.models[0].add_delta(&mean)?]))
}

/// Sample-size-weighted averaging of local updates into one global model.
pub struct FedAvg;

impl Strategy for FedAvg {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedAvg
    }

    fn init_state(&self, _n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        global_state(init, hyper)
    }

    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>> {
        train_each(state, partitions, seeds)
    }

    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        partitions: &[ClientPartition],
    ) -> Result<StrategyState> {
        apply_mean_delta(state, updates, partitions)
    }
}

/// Clients send one full-batch gradient each; the server steps the global
/// model along their sample-size-weighted mean. The update's `delta` field
/// carries the gradient.
pub struct FedSgd;

impl Strategy for FedSgd {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedSgd
    }

    fn init_state(&self, _n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        global_state(init, hyper)
    }

    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        _seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>> {
        partitions
            .par_iter()
            .map(|p| {
                Ok(ClientUpdate {
                    client_id: p.client_id,
                    delta: gradient(&state.models[0], &p.train)?,
                    train_size: p.train.len(),
                })
            })
            .collect()
    }

    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        partitions: &[ClientPartition],
    ) -> Result<StrategyState> {
        let updates = check_round_updates(state.round, partitions.len(), updates)?;
        let mean_grad = fedavg_aggregate(&updates)?;
        Ok(state.advanced(vec![sgd_step(
            &state.models[0],
            &mean_grad,
            state.hyper.train.lr,
        )]))
    }
}

pub fn fedsgd_round(
    state: &StrategyState,
    partitions: &[ClientPartition],
    seeds: &[u64],
) -> Result<StrategyState> {
    let updates = FedSgd.client_updates(state, partitions, seeds)?;
    FedSgd.apply(state, &updates, partitions)
}

/// Which clients get an extra epoch: those whose loss is strictly above the
/// median loss.
pub fn loadaboost_gate(losses: &[f64]) -> Result<Vec<bool>> {
    let mid = median(losses)?;
    Ok(losses.iter().map(|&l| l > mid).collect())
}

/// FedAvg where clients whose post-training cross-entropy on their own
/// training share exceeds the cross-client median train one more epoch
/// before averaging.
pub struct LoAdaBoost;

impl Strategy for LoAdaBoost {
    fn kind(&self) -> StrategyKind {
        StrategyKind::LoAdaBoost
    }

    fn init_state(&self, _n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        global_state(init, hyper)
    }

    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>> {
        check_seeds(partitions, seeds)?;
        let start = &state.models[0];
        let hp = state.hyper.train;
        let trained = partitions
            .par_iter()
            .zip(seeds)
            .map(|(p, &seed)| {
                let params = sgd_train(start, &p.train, &hp, seed)?;
                let l = loss(&params, &p.train)?;
                Ok((params, l))
            })
            .collect::<Result<Vec<(ModelParams, f64)>>>()?;
        let losses: Vec<f64> = trained.iter().map(|(_, l)| *l).collect();
        let gate = loadaboost_gate(&losses)?;
        let extra = TrainParams { epochs: 1, ..hp };
        partitions
            .par_iter()
            .zip(seeds)
            .zip(trained.into_par_iter().zip(gate))
            .map(|((p, &seed), ((params, _), boost))| {
                let params = if boost {
                    sgd_train(
                        &params,
                        &p.train,
                        &extra,
                        derive_seed(seed, &[BOOST_STREAM]),
                    )?
                } else {
                    params
                };
                Ok(ClientUpdate {
                    client_id: p.client_id,
                    delta: start.delta_to(&params),
                    train_size: p.train.len(),
                })
            })
            .collect()
    }

    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        partitions: &[ClientPartition],
    ) -> Result<StrategyState> {
        apply_mean_delta(state, updates, partitions)
    }
}

pub fn loadaboost_round(
    state: &StrategyState,
    partitions: &[ClientPartition],
    seeds: &[u64],
) -> Result<StrategyState> {
    let updates = LoAdaBoost.client_updates(state, partitions, seeds)?;
    LoAdaBoost.apply(state, &updates, partitions)
}

/// Each client trains its own model; nothing is shared.
pub struct LocalOnly;

impl Strategy for LocalOnly {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Local
    }

    fn communicates(&self) -> bool {
        false
    }

    fn init_state(&self, n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        per_client_state(n_clients, init, hyper)
    }

    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>> {
        train_each(state, partitions, seeds)
    }

    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        partitions: &[ClientPartition],
    ) -> Result<StrategyState> {
        let updates = check_round_updates(state.round, partitions.len(), updates)?;
        let models = state
            .models
            .iter()
            .zip(&updates)
            .map(|(m, u)| m.add_delta(&u.delta))
            .collect::<Result<Vec<_>>>()?;
        Ok(state.advanced(models))
    }
}

pub fn local_only_round(
    state: &StrategyState,
    partitions: &[ClientPartition],
    seeds: &[u64],
) -> Result<StrategyState> {
    let updates = LocalOnly.client_updates(state, partitions, seeds)?;
    LocalOnly.apply(state, &updates, partitions)
}

/// All clients' training shares concatenated in client-id order.
pub fn pooled_train(partitions: &[ClientPartition]) -> Vec<&Example> {
    let mut sorted: Vec<&ClientPartition> = partitions.iter().collect();
    sorted.sort_by_key(|p| p.client_id);
    sorted.iter().flat_map(|p| p.train.iter()).collect()
}

/// Trains one model on the pooled training shares.
pub fn centralized_train(
    params: &ModelParams,
    partitions: &[ClientPartition],
    hp: &TrainParams,
    seed: u64,
) -> Result<ModelParams> {
    let pool = pooled_train(partitions);
    if pool.is_empty() {
        return Err(contract("centralized training on an empty pool"));
    }
    sgd_train(params, &pool, hp, seed)
}

/// A single model trained on everyone's data, evaluated per client. It uses
/// client 0's seed stream, so with one client it coincides with local-only
/// training.
pub struct Centralized;

impl Strategy for Centralized {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Centralized
    }

    fn communicates(&self) -> bool {
        false
    }

    fn init_state(&self, _n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        global_state(init, hyper)
    }

    fn client_updates(
        &self,
        state: &StrategyState,
        partitions: &[ClientPartition],
        seeds: &[u64],
    ) -> Result<Vec<ClientUpdate>> {
        check_seeds(partitions, seeds)?;
        let pool = pooled_train(partitions);
        if pool.is_empty() {
            return Err(contract("centralized training on an empty pool"));
        }
        Ok(vec![local_train(
            0,
            &state.models[0],
            &pool,
            &state.hyper.train,
            seeds[0],
        )?])
    }

    fn apply(
        &self,
        state: &StrategyState,
        updates: &[ClientUpdate],
        _partitions: &[ClientPartition],
    ) -> Result<StrategyState> {
        match updates {
            [u] if u.client_id == 0 => {
                Ok(state.advanced(vec![state.models[0].add_delta(&u.delta)?]))
            }
            _ => Err(Error::Protocol {
                round: state.round,
                detail: format!(
                    "centralized training expects one pooled update, got {}",
                    updates.len()
                ),
            }),
        }
    }
}
