//! The round loop: build data, start from a server-initialized model, then
//! for every round train locally, exchange updates, aggregate and record.

use std::net::ToSocketAddrs;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, StrategyKind, TransportKind, FEATURE_DIM};
use crate::data::{build_paired_clients, ClientPartition};
use crate::error::{Error, Result};
use crate::model::{accuracy, gradient, local_train, loss, sgd_step, ClientUpdate, ModelParams};
use crate::seed::{derive_seed, TRAIN_STREAM};
use crate::strategy::{
    fedavg_aggregate, fedsmart_client_step, strategy_for, Hyper, PeerWeights, StrategyState,
};
use crate::transport::{
    ClientConnection, InProcessTransport, ServerSetup, TcpTransport, Transport,
};

/// Metrics after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub per_client_val_accuracy: Vec<f64>,
    pub per_client_val_loss: Vec<f64>,
    /// Row `i` holds client `i`'s peer weights.
    pub weight_matrix: Vec<Vec<f64>>,
}

/// Per-client training seeds for `round`.
pub fn training_seeds(config: &ExperimentConfig, round: u64) -> Vec<u64> {
    (0..config.n_clients as u64)
        .map(|id| derive_seed(config.master_seed, &[TRAIN_STREAM, id, round]))
        .collect()
}

/// The server's initial model: all zeros.
pub fn initial_model() -> ModelParams {
    ModelParams::zeros(FEATURE_DIM)
}

fn hyper(config: &ExperimentConfig) -> Hyper {
    Hyper {
        eta: config.eta,
        train: config.train_params(),
    }
}

fn evaluate(state: &StrategyState, partitions: &[ClientPartition]) -> Result<(Vec<f64>, Vec<f64>)> {
    let scores = partitions
        .par_iter()
        .map(|p| {
            let model = state.model_for(p.client_id);
            Ok((accuracy(model, &p.validation)?, loss(model, &p.validation)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    Ok(scores.into_iter().unzip())
}

fn round_tagged(round: u64, err: Error) -> Error {
    match err {
        Error::Protocol { .. } => err,
        other => Error::Protocol {
            round,
            detail: other.to_string(),
        },
    }
}

/// Runs `config` end to end and returns one record per round.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    let partitions = build_paired_clients(config)?;
    run_on_partitions(config, &partitions)
}

/// Like [`run_experiment`] but on caller-provided partitions.
pub fn run_on_partitions(
    config: &ExperimentConfig,
    partitions: &[ClientPartition],
) -> Result<Vec<RoundRecord>> {
    config.validate()?;
    let n = config.n_clients;
    if partitions.len() != n {
        return Err(Error::Config(format!(
            "{} partitions for {n} clients",
            partitions.len()
        )));
    }
    let strategy = strategy_for(config.strategy);
    let init = initial_model();

    let mut transport: Option<Box<dyn Transport>> = if strategy.communicates() {
        Some(match config.transport {
            TransportKind::InProcess => Box::new(InProcessTransport::new(n, init.clone())),
            TransportKind::Tcp => Box::new(TcpTransport::start(
                ServerSetup {
                    n_clients: n,
                    rounds: config.rounds,
                    dim: FEATURE_DIM,
                    init: init.clone(),
                },
                partitions.iter().map(|p| p.train.len()).collect(),
            )?),
        })
    } else {
        None
    };
    let start = transport
        .as_ref()
        .map_or(init, |t| t.initial_model().clone());
    let mut state = strategy.init_state(n, &start, hyper(config));

    let mut records = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let seeds = training_seeds(config, round);
        let updates = strategy.client_updates(&state, partitions, &seeds)?;
        let collected = match transport.as_mut() {
            Some(t) => t
                .exchange_round(round, updates)
                .map_err(|e| round_tagged(round, e))?,
            None => updates,
        };
        state = strategy.apply(&state, &collected, partitions)?;
        let (per_client_val_accuracy, per_client_val_loss) = evaluate(&state, partitions)?;
        records.push(RoundRecord {
            round,
            per_client_val_accuracy,
            per_client_val_loss,
            weight_matrix: state.weight_matrix(n),
        });
    }
    if let Some(t) = transport {
        t.finish().map_err(|e| round_tagged(config.rounds, e))?;
    }
    Ok(records)
}

/// One run of a sweep.
#[derive(Debug)]
pub struct SweepRun {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub outcome: Result<Vec<RoundRecord>>,
}

/// One row of the combined sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub round: u64,
    pub mean_val_accuracy: f64,
    pub min_val_accuracy: f64,
    pub max_val_accuracy: f64,
    pub mean_val_loss: f64,
}

#[derive(Debug)]
pub struct SweepReport {
    pub base: ExperimentConfig,
    pub runs: Vec<SweepRun>,
}

impl SweepReport {
    /// Rows for every successful run, keyed by (strategy, seed, round) in
    /// sweep order.
    pub fn rows(&self) -> Vec<SweepRow> {
        self.runs
            .iter()
            .filter_map(|run| run.outcome.as_ref().ok().map(|records| (run, records)))
            .flat_map(|(run, records)| {
                records.iter().map(move |r| {
                    let acc = &r.per_client_val_accuracy;
                    let n = acc.len() as f64;
                    SweepRow {
                        strategy: run.strategy,
                        seed: run.seed,
                        round: r.round,
                        mean_val_accuracy: acc.iter().sum::<f64>() / n,
                        min_val_accuracy: acc.iter().copied().fold(f64::INFINITY, f64::min),
                        max_val_accuracy: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        mean_val_loss: r.per_client_val_loss.iter().sum::<f64>() / n,
                    }
                })
            })
            .collect()
    }

    /// Errors of failed runs, each tagged with its run identity.
    pub fn failures(&self) -> Vec<Error> {
        self.runs
            .iter()
            .filter_map(|run| match &run.outcome {
                Err(e) => Some(Error::Run {
                    strategy: run.strategy.to_string(),
                    seed: run.seed,
                    source: Box::new(Error::Config(e.to_string())),
                }),
                Ok(_) => None,
            })
            .collect()
    }

    pub fn config_for(&self, strategy: StrategyKind, seed: u64) -> ExperimentConfig {
        sweep_config(&self.base, strategy, seed)
    }
}

fn sweep_config(base: &ExperimentConfig, strategy: StrategyKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        strategy,
        master_seed: seed,
        ..base.clone()
    }
}

/// Runs every (strategy, seed) combination. A failing run is reported in its
/// slot; the others still run.
pub fn run_sweep(
    base: &ExperimentConfig,
    strategies: &[StrategyKind],
    seeds: &[u64],
) -> Result<SweepReport> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "a sweep needs at least one strategy and one seed".into(),
        ));
    }
    let combos: Vec<(StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&s| seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let runs = combos
        .into_par_iter()
        .map(|(strategy, seed)| SweepRun {
            strategy,
            seed,
            outcome: run_experiment(&sweep_config(base, strategy, seed)),
        })
        .collect();
    Ok(SweepReport {
        base: base.clone(),
        runs,
    })
}

/// Metrics of one client after each round of a distributed run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub round: u64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub weights: Vec<f64>,
}

/// Runs one client of a distributed experiment against a relay server.
///
/// The client regenerates the shared partition layout from `config` so it
/// knows its own data and every peer's sample count, then plays its part of
/// the configured strategy.
pub fn run_remote_client(
    config: &ExperimentConfig,
    client_id: usize,
    server: impl ToSocketAddrs,
) -> Result<Vec<ClientRoundRecord>> {
    config.validate()?;
    if client_id >= config.n_clients {
        return Err(Error::Config(format!(
            "client id {client_id} out of range for {} clients",
            config.n_clients
        )));
    }
    if matches!(
        config.strategy,
        StrategyKind::LoAdaBoost | StrategyKind::Centralized
    ) {
        return Err(Error::Config(format!(
            "strategy {} cannot run as separate client processes",
            config.strategy
        )));
    }
    let partitions = build_paired_clients(config)?;
    let own = &partitions[client_id];
    let sizes: Vec<usize> = partitions.iter().map(|p| p.train.len()).collect();
    let hp = config.train_params();
    let n = config.n_clients;

    let (mut conn, mut model) = ClientConnection::connect(server, client_id, FEATURE_DIM)?;
    let mut weights = PeerWeights::uniform(client_id, n);
    let mut records = Vec::with_capacity(config.rounds as usize);
    for round in 0..config.rounds {
        let seed = training_seeds(config, round)[client_id];
        let outgoing = match config.strategy {
            StrategyKind::FedSgd => gradient(&model, &own.train)?,
            _ => local_train(client_id, &model, &own.train, &hp, seed)?.delta,
        };
        conn.send_update(round, &outgoing)?;
        let packed: Vec<ClientUpdate> = conn
            .recv_packed(round)?
            .into_iter()
            .map(|(id, delta)| ClientUpdate {
                client_id: id,
                delta,
                train_size: sizes[id],
            })
            .collect();
        let packed = crate::strategy::check_round_updates(round, n, &packed)?;
        model = match config.strategy {
            StrategyKind::FedSmart => {
                let step =
                    fedsmart_client_step(&model, &weights, &packed, &own.validation, config.eta)?;
                weights = step.weights;
                step.model
            }
            StrategyKind::FedAvg => model.add_delta(&fedavg_aggregate(&packed)?)?,
            StrategyKind::FedSgd => sgd_step(&model, &fedavg_aggregate(&packed)?, config.lr),
            StrategyKind::Local => model.add_delta(&packed[client_id].delta)?,
            StrategyKind::LoAdaBoost | StrategyKind::Centralized => unreachable!("rejected above"),
        };
        records.push(ClientRoundRecord {
            round,
            val_accuracy: accuracy(&model, &own.validation)?,
            val_loss: loss(&model, &own.validation)?,
            weights: weights.weights.clone(),
        });
    }
    conn.recv_shutdown()?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Heterogeneity;

    fn small(strategy: StrategyKind) -> ExperimentConfig {
        ExperimentConfig {
            rounds: 4,
            samples_per_client: 300,
            strategy,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_rounds_rejected() {
        let config = ExperimentConfig {
            rounds: 0,
            ..small(StrategyKind::FedAvg)
        };
        assert!(matches!(run_experiment(&config), Err(Error::Config(_))));
    }

    #[test]
    fn records_are_complete() {
        for &kind in StrategyKind::ALL {
            let records = run_experiment(&small(kind)).unwrap();
            assert_eq!(records.len(), 4, "{kind}");
            for (t, r) in records.iter().enumerate() {
                assert_eq!(r.round, t as u64);
                assert_eq!(r.per_client_val_accuracy.len(), 6);
                assert_eq!(r.per_client_val_loss.len(), 6);
                assert_eq!(r.weight_matrix.len(), 6);
                for row in &r.weight_matrix {
                    assert_eq!(row.len(), 6);
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
                assert!(r
                    .per_client_val_accuracy
                    .iter()
                    .all(|a| (0.0..=1.0).contains(a)));
            }
        }
    }

    #[test]
    fn local_strategy_reports_uniform_weights() {
        let records = run_experiment(&small(StrategyKind::Local)).unwrap();
        for r in records {
            assert!(r.weight_matrix.iter().flatten().all(|&w| w == 1.0 / 6.0));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let config = small(StrategyKind::FedSmart);
        assert_eq!(
            run_experiment(&config).unwrap(),
            run_experiment(&config).unwrap()
        );
    }

    #[test]
    fn tcp_matches_in_process() {
        for kind in [
            StrategyKind::FedSmart,
            StrategyKind::FedSgd,
            StrategyKind::LoAdaBoost,
        ] {
            let config = small(kind);
            let tcp = ExperimentConfig {
                transport: TransportKind::Tcp,
                ..config.clone()
            };
            assert_eq!(
                run_experiment(&config).unwrap(),
                run_experiment(&tcp).unwrap()
            );
        }
    }

    #[test]
    fn sweep_shapes_and_identity() {
        let base = small(StrategyKind::FedAvg);
        let single = run_sweep(&base, &[StrategyKind::FedAvg], &[1]).unwrap();
        assert_eq!(
            single.runs[0].outcome.as_ref().unwrap(),
            &run_experiment(&base).unwrap()
        );

        let all = run_sweep(&base, StrategyKind::ALL, &[1, 2, 3]).unwrap();
        let rows = all.rows();
        for round in 0..4 {
            assert_eq!(rows.iter().filter(|r| r.round == round).count(), 18);
        }
        assert!(all.failures().is_empty());
        assert!(run_sweep(&base, &[], &[1]).is_err());
    }

    #[test]
    fn sweep_reports_failures_per_run() {
        let base = ExperimentConfig {
            n_clients: 2,
            samples_per_client: 2,
            heterogeneity: Heterogeneity::PairedNonIid,
            ..small(StrategyKind::FedAvg)
        };
        // A 1-example training share cannot hold both classes, so
        // up-sampling fails; a factor of one skips it.
        let report = run_sweep(&base, &[StrategyKind::FedAvg], &[1, 2]).unwrap();
        assert!(report.runs.iter().all(|r| r.outcome.is_err()));
        let failures = report.failures();
        assert_eq!(failures.len(), 2);
        assert!(failures[0].to_string().contains("fedavg/seed 1"));
        let ok = ExperimentConfig {
            upsample_factor: 1,
            ..base
        };
        assert!(run_sweep(&ok, &[StrategyKind::FedAvg], &[1])
            .unwrap()
            .failures()
            .is_empty());
    }

    #[test]
    fn strategy_choice_does_not_change_data() {
        let a = small(StrategyKind::FedSmart);
        let b = small(StrategyKind::Centralized);
        assert_eq!(
            build_paired_clients(&a).unwrap(),
            build_paired_clients(&b).unwrap()
        );
    }

    #[test]
    fn remote_clients_reproduce_the_engine() {
        for kind in [
            StrategyKind::FedSmart,
            StrategyKind::FedAvg,
            StrategyKind::FedSgd,
            StrategyKind::Local,
        ] {
            let config = small(kind);
            let expected = run_experiment(&config).unwrap();
            let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap();
            let setup = ServerSetup {
                n_clients: config.n_clients,
                rounds: config.rounds,
                dim: FEATURE_DIM,
                init: initial_model(),
            };
            let server = std::thread::spawn(move || crate::transport::serve(&listener, &setup));
            let clients: Vec<_> = (0..config.n_clients)
                .map(|id| {
                    let config = config.clone();
                    std::thread::spawn(move || run_remote_client(&config, id, addr))
                })
                .collect();
            let per_client: Vec<Vec<ClientRoundRecord>> = clients
                .into_iter()
                .map(|h| h.join().unwrap().unwrap())
                .collect();
            server.join().unwrap().unwrap();
            for (t, record) in expected.iter().enumerate() {
                for (i, client) in per_client.iter().enumerate() {
                    assert_eq!(
                        client[t].val_accuracy, record.per_client_val_accuracy[i],
                        "{kind}"
                    );
                    assert_eq!(client[t].val_loss, record.per_client_val_loss[i], "{kind}");
                    assert_eq!(client[t].weights, record.weight_matrix[i], "{kind}");
                }
            }
        }
    }
}
