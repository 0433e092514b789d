//! Performance-weighted personalized aggregation.
//!
//! Every client `i` keeps its own model and a weight vector over all peers.
//! Each round, client `i` scores every peer's update by applying it alone to
//! its own model and measuring accuracy on its private validation share. The
//! weights move by `η · (acc_j − median(acc))`, are clamped at zero and
//! renormalized, and the client's model then takes the weighted mixture of
//! all updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{median, mix_deltas};
use super::{check_round_updates, train_each, Hyper, Strategy, StrategyState};
use crate::config::StrategyKind;
use crate::data::ClientPartition;
use crate::error::{contract, Result};
use crate::model::{accuracy, ClientUpdate, Example, ModelParams};

/// One client's mixing distribution over all clients (itself included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerWeights {
    pub owner: usize,
    pub weights: Vec<f64>,
}

impl PeerWeights {
    pub fn uniform(owner: usize, n: usize) -> Self {
        Self {
            owner,
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Nonnegative entries summing to one within `tol`.
    pub fn is_simplex(&self, tol: f64) -> bool {
        self.weights.iter().all(|&w| w >= 0.0 && w.is_finite())
            && (self.weights.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Entry `j`: accuracy of the owner's model after applying client `j`'s
/// update, measured on the owner's validation share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAccuracies {
    pub values: Vec<f64>,
}

/// Moves each weight by `eta · (acc_j − median(acc))`, clamps negatives to
/// zero and renormalizes; an all-zero result falls back to uniform. When
/// every accuracy equals the median the previous weights come back
/// unchanged.
pub fn fedsmart_weight_update(
    prev: &PeerWeights,
    accs: &RoundAccuracies,
    eta: f64,
) -> Result<PeerWeights> {
    let n = prev.weights.len();
    if accs.values.len() != n {
        return Err(contract(format!(
            "{} accuracies for {} peer weights",
            accs.values.len(),
            n
        )));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(contract(format!("eta must be positive, got {eta}")));
    }
    let mid = median(&accs.values)?;
    let deviations: Vec<f64> = accs.values.iter().map(|a| a - mid).collect();
    if deviations.iter().all(|&d| d == 0.0) {
        return Ok(prev.clone());
    }
    let raw: Vec<f64> = prev
        .weights
        .iter()
        .zip(&deviations)
        .map(|(w, d)| (w + eta * d).max(0.0))
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|r| r / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    Ok(PeerWeights {
        owner: prev.owner,
        weights,
    })
}

/// Scores every update against the owner's model and validation share.
pub fn candidate_accuracies(
    model: &ModelParams,
    updates: &[ClientUpdate],
    validation: &[Example],
) -> Result<RoundAccuracies> {
    let values = updates
        .iter()
        .map(|u| accuracy(&model.add_delta(&u.delta)?, validation))
        .collect::<Result<Vec<f64>>>()?;
    Ok(RoundAccuracies { values })
}

/// Result of one client's FedSmart step.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStep {
    pub model: ModelParams,
    pub weights: PeerWeights,
    pub accuracies: RoundAccuracies,
}

/// One client's share of a round: score candidates, update the weights, then
/// apply the weighted mixture of all updates. `updates` must be in client-id
/// order.
pub fn fedsmart_client_step(
    model: &ModelParams,
    weights: &PeerWeights,
    updates: &[ClientUpdate],
    validation: &[Example],
    eta: f64,
) -> Result<ClientStep> {
    let accuracies = candidate_accuracies(model, updates, validation)?;
    let weights = fedsmart_weight_update(weights, &accuracies, eta)?;
    let deltas: Vec<&[f64]> = updates.iter().map(|u| u.delta.as_slice()).collect();
    let mixed = mix_deltas(&weights.weights, &deltas)?;
    Ok(ClientStep {
        model: model.add_delta(&mixed)?,
        weights,
        accuracies,
    })
}

/// Applies one FedSmart round to every client.
pub fn fedsmart_round(
    state: &StrategyState,
    updates: &[ClientUpdate],
    partitions: &[ClientPartition],
) -> Result<StrategyState> {
    let n = state.models.len();
    let updates = check_round_updates(state.round, n, updates)?;
    let peer_weights = state
        .peer_weights
        .as_ref()
        .ok_or_else(|| contract("FedSmart state carries no peer weights"))?;
    if partitions.len() != n || peer_weights.len() != n {
        return Err(contract(format!(
            "FedSmart state has {n} models, {} weight vectors and {} partitions",
            peer_weights.len(),
            partitions.len()
        )));
    }
    let steps = (0..n)
        .into_par_iter()
        .map(|i| {
            fedsmart_client_step(
                &state.models[i],
                &peer_weights[i],
                &updates,
                &partitions[i].validation,
                state.hyper.eta,
            )
        })
        .collect::<Result<Vec<ClientStep>>>()?;
    let (models, weights) = steps.into_iter().map(|s| (s.model, s.weights)).unzip();
    Ok(StrategyState {
        models,
        peer_weights: Some(weights),
        round: state.round + 1,
        hyper: state.hyper,
    })
}

pub struct FedSmart;

impl Strategy for FedSmart {
    fn kind(&self) -> StrategyKind {
        StrategyKind::FedSmart
    }

    fn init_state(&self, n_clients: usize, init: &ModelParams, hyper: Hyper) -> StrategyState {
        StrategyState {
            models: vec![init.clone(); n_clients],
            peer_weights: Some(
                (0..n_clients)
                    .map(|i| PeerWeights::uniform(i, n_clients))
                    .collect(),
            ),
            round: 0,
            hyper,
        }
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
        fedsmart_round(state, updates, partitions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainParams;
    use crate::strategy::Strategy;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as PropStrategy;

    fn pw(weights: &[f64]) -> PeerWeights {
        PeerWeights {
            owner: 0,
            weights: weights.to_vec(),
        }
    }

    fn accs(values: &[f64]) -> RoundAccuracies {
        RoundAccuracies {
            values: values.to_vec(),
        }
    }

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn equal_accuracies_keep_weights() {
        let prev = pw(&[0.25; 4]);
        let next = fedsmart_weight_update(&prev, &accs(&[0.7; 4]), 3.0).unwrap();
        assert_eq!(next, prev);
    }

    #[test]
    fn weights_follow_accuracy_spread() {
        let next =
            fedsmart_weight_update(&pw(&[0.25; 4]), &accs(&[0.9, 0.8, 0.7, 0.6]), 1.0).unwrap();
        assert_close(&next.weights, &[0.40, 0.30, 0.20, 0.10]);
    }

    #[test]
    fn negative_weights_are_clamped() {
        let next =
            fedsmart_weight_update(&pw(&[0.1, 0.3, 0.6]), &accs(&[0.5, 0.9, 0.9]), 1.0).unwrap();
        assert_close(&next.weights, &[0.0, 1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn all_zero_raw_weights_fall_back_to_uniform() {
        let prev = pw(&[0.0, 1.0]);
        let out = fedsmart_weight_update(&prev, &accs(&[0.9, 0.1]), 2.5).unwrap();
        // raw = [0 + 2.5·0.4, 1 − 2.5·0.4] = [1, 0]
        assert_close(&out.weights, &[1.0, 0.0]);
        let out =
            fedsmart_weight_update(&pw(&[0.0, 0.0, 1.0]), &accs(&[0.5, 0.5, 0.0]), 2.0).unwrap();
        assert_close(&out.weights, &[1.0 / 3.0; 3]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(fedsmart_weight_update(&pw(&[0.5, 0.5]), &accs(&[0.1, 0.2, 0.3]), 1.0).is_err());
        assert!(fedsmart_weight_update(&pw(&[0.5, 0.5]), &accs(&[0.1, 0.2]), 0.0).is_err());
    }

    fn hyper() -> Hyper {
        Hyper {
            eta: 0.5,
            train: TrainParams {
                epochs: 1,
                batch_size: 4,
                lr: 0.1,
            },
        }
    }

    fn partition(id: usize, validation: Vec<Example>) -> ClientPartition {
        ClientPartition {
            client_id: id,
            train: validation.clone(),
            validation,
            distribution_id: 0,
        }
    }

    #[test]
    fn single_client_round_is_local_step() {
        let init = ModelParams {
            weights: vec![0.3, -0.2],
            bias: 0.1,
        };
        let state = FedSmart.init_state(1, &init, hyper());
        let val = vec![
            Example::new(vec![1.0, 0.0], 1),
            Example::new(vec![0.0, 1.0], 0),
        ];
        let update = ClientUpdate {
            client_id: 0,
            delta: vec![0.5, 0.25, -0.125],
            train_size: 2,
        };
        let next =
            fedsmart_round(&state, std::slice::from_ref(&update), &[partition(0, val)]).unwrap();
        assert_eq!(next.round, 1);
        assert_eq!(next.peer_weights.as_ref().unwrap()[0].weights, vec![1.0]);
        assert_eq!(next.models[0], init.add_delta(&update.delta).unwrap());
    }

    #[test]
    fn identical_deltas_ignore_weights() {
        let init = ModelParams::zeros(2);
        let mut state = FedSmart.init_state(3, &init, hyper());
        state.models[1].bias = 0.7;
        state.peer_weights.as_mut().unwrap()[2].weights = vec![0.1, 0.2, 0.7];
        let delta = vec![0.4, -0.9, 0.05];
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|i| ClientUpdate {
                client_id: i,
                delta: delta.clone(),
                train_size: 3,
            })
            .collect();
        let val = vec![
            Example::new(vec![1.0, 1.0], 1),
            Example::new(vec![-1.0, 0.5], 0),
        ];
        let parts: Vec<_> = (0..3).map(|i| partition(i, val.clone())).collect();
        let next = fedsmart_round(&state, &updates, &parts).unwrap();
        for i in 0..3 {
            assert_eq!(next.models[i], state.models[i].add_delta(&delta).unwrap());
        }
    }

    #[test]
    fn missing_or_duplicate_updates_are_protocol_errors() {
        let state = FedSmart.init_state(2, &ModelParams::zeros(1), hyper());
        let val = vec![Example::new(vec![1.0], 1)];
        let parts = vec![partition(0, val.clone()), partition(1, val)];
        let u = |id| ClientUpdate {
            client_id: id,
            delta: vec![0.0, 0.0],
            train_size: 1,
        };
        for bad in [vec![u(0)], vec![u(0), u(0)], vec![u(0), u(5)]] {
            assert!(matches!(
                fedsmart_round(&state, &bad, &parts),
                Err(crate::Error::Protocol { .. })
            ));
        }
        // Order does not matter.
        assert!(fedsmart_round(&state, &[u(1), u(0)], &parts).is_ok());
    }

    fn simplex(len: usize) -> impl PropStrategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, len).prop_map(|raw| {
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                vec![1.0 / raw.len() as f64; raw.len()]
            } else {
                raw.iter().map(|r| r / total).collect()
            }
        })
    }

    proptest! {
        #[test]
        fn update_stays_on_simplex(
            (prev, values) in (1usize..9).prop_flat_map(|n| (simplex(n), proptest::collection::vec(0.0f64..=1.0, n))),
            eta in 0.01f64..5.0,
        ) {
            let next = fedsmart_weight_update(&pw(&prev), &accs(&values), eta).unwrap();
            prop_assert!(next.is_simplex(1e-9));
        }

        #[test]
        fn equal_accuracy_is_a_fixed_point(
            prev in (1usize..9).prop_flat_map(simplex),
            acc in 0.0f64..=1.0,
            eta in 0.01f64..5.0,
        ) {
            let values = vec![acc; prev.len()];
            let next = fedsmart_weight_update(&pw(&prev), &accs(&values), eta).unwrap();
            prop_assert_eq!(next.weights, prev);
        }

        #[test]
        fn raising_an_above_median_accuracy_never_lowers_its_weight(
            (prev, mut values) in (2usize..9).prop_flat_map(|n| (simplex(n), proptest::collection::vec(0.0f64..=0.9, n))),
            bump in 0.0f64..0.1,
            eta in 0.01f64..5.0,
        ) {
            // Pick the top-ranked entry: raising it cannot move the median.
            let j = (0..values.len()).max_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
            let before = fedsmart_weight_update(&pw(&prev), &accs(&values), eta).unwrap();
            values[j] += bump;
            let after = fedsmart_weight_update(&pw(&prev), &accs(&values), eta).unwrap();
            prop_assert!(after.weights[j] >= before.weights[j] - 1e-15);
        }
    }
}
