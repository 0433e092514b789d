//! The acceptance suite: ten end-to-end checks, each with a runtime budget.
//!
//! Numeric checks compare against the independent implementations in
//! [`reference`]; experiment checks run the default configuration over a
//! fixed set of master seeds.

pub mod reference;

use std::collections::hash_map::{Entry, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Heterogeneity, StrategyKind, TransportKind};
use crate::data::ClientPartition;
use crate::engine::{run_experiment, run_sweep, RoundRecord};
use crate::error::{Error, Result};
use crate::model::{gradient, ClientUpdate, Example, ModelParams, TrainParams};
use crate::report::{
    pairing_indicator, read_weights_csv, write_bundle, Pairing, ReportBundle, ACCURACY_FILE,
    SUMMARY_FILE, WEIGHTS_FILE,
};
use crate::strategy::{
    fedsmart_round, fedsmart_weight_update, Hyper, PeerWeights, RoundAccuracies, StrategyState,
};

/// Master seeds of the multi-seed experiment checks.
pub const SEEDS: [u64; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

/// Result of one criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    /// The check itself held; see [`Outcome::passed`] for the budget too.
    pub check_passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    pub limit: Duration,
}

impl Outcome {
    pub fn within_budget(&self) -> bool {
        self.elapsed <= self.limit
    }

    pub fn passed(&self) -> bool {
        self.check_passed && self.within_budget()
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] criterion {:>2} {}: {} ({:.2}s, limit {}s{})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs(),
            if self.within_budget() {
                ""
            } else {
                ", over budget"
            }
        )
    }
}

struct Criterion {
    id: u8,
    title: &'static str,
    limit_secs: u64,
}

const CRITERIA: [Criterion; 10] = [
    Criterion {
        id: 1,
        title: "gradient matches finite differences",
        limit_secs: 1,
    },
    Criterion {
        id: 2,
        title: "weight update matches brute force",
        limit_secs: 1,
    },
    Criterion {
        id: 3,
        title: "FedSmart round matches reference loop",
        limit_secs: 5,
    },
    Criterion {
        id: 4,
        title: "weight rows stay on the simplex",
        limit_secs: 30,
    },
    Criterion {
        id: 5,
        title: "weights concentrate on pair-mates",
        limit_secs: 300,
    },
    Criterion {
        id: 6,
        title: "FedSmart beats local training",
        limit_secs: 300,
    },
    Criterion {
        id: 7,
        title: "FedSmart vs FedAvg on non-IID and IID",
        limit_secs: 300,
    },
    Criterion {
        id: 8,
        title: "runs are byte-for-byte deterministic",
        limit_secs: 60,
    },
    Criterion {
        id: 9,
        title: "TCP transport matches in-process",
        limit_secs: 120,
    },
    Criterion {
        id: 10,
        title: "equal accuracies leave weights unchanged",
        limit_secs: 1,
    },
];

/// Identifiers of every criterion, in order.
pub fn criterion_ids() -> Vec<u8> {
    CRITERIA.iter().map(|c| c.id).collect()
}

/// Runs every criterion.
pub fn run_all() -> Vec<Outcome> {
    run_selected(&criterion_ids()).expect("all ids are known")
}

/// Runs the listed criteria in the given order.
pub fn run_selected(ids: &[u8]) -> Result<Vec<Outcome>> {
    if let Some(bad) = ids.iter().find(|id| !CRITERIA.iter().any(|c| c.id == **id)) {
        return Err(Error::Config(format!(
            "unknown acceptance criterion {bad}; expected 1 to {}",
            CRITERIA.len()
        )));
    }
    let mut runs = SeedRuns::default();
    Ok(ids
        .iter()
        .map(|&id| {
            let c = CRITERIA.iter().find(|c| c.id == id).expect("checked above");
            let start = Instant::now();
            let result = match id {
                1 => gradient_check(),
                2 => weight_update_oracle(),
                3 => round_oracle(),
                4 => simplex_invariant(),
                5 => pairing_emergence(&mut runs),
                6 => beats_local(&mut runs),
                7 => versus_fedavg(&mut runs),
                8 => determinism(),
                9 => transport_equivalence(),
                _ => equal_accuracy_fixed_point(),
            };
            let elapsed = start.elapsed();
            let (check_passed, detail) = match result {
                Ok(verdict) => verdict,
                Err(e) => (false, format!("error: {e}")),
            };
            Outcome {
                id,
                title: c.title,
                check_passed,
                detail,
                elapsed,
                limit: Duration::from_secs(c.limit_secs),
            }
        })
        .collect())
}

type Verdict = Result<(bool, String)>;

fn labeled(data: &[Example]) -> Vec<reference::Labeled> {
    data.iter().map(|e| (e.features.clone(), e.label)).collect()
}

fn random_examples(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Example> {
    (0..n)
        .map(|_| {
            let features = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Example::new(features, rng.gen_range(0..=1))
        })
        .collect()
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_bool(0.2) {
                0.0
            } else {
                rng.gen_range(0.0..1.0)
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|v| v / total).collect()
}

fn gradient_check() -> Verdict {
    const CHECKS: usize = 100;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6752_4144);
    let mut worst = 0.0_f64;
    let mut ok = 0;
    for _ in 0..CHECKS {
        let dim = rng.gen_range(1..=10);
        let size = rng.gen_range(1..=32);
        let batch = random_examples(&mut rng, size, dim);
        let flat: Vec<f64> = (0..=dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let analytic = gradient(&ModelParams::from_flat(&flat)?, &batch)?;
        let data = labeled(&batch);
        let numeric = reference::numeric_gradient(|p| reference::loss(p, &data), &flat, 1e-6);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        let err = analytic
            .iter()
            .zip(&numeric)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            / scale;
        worst = worst.max(err);
        if err <= TOL {
            ok += 1;
        }
    }
    Ok((
        ok == CHECKS,
        format!("{ok}/{CHECKS} within relative error {TOL:e}, worst {worst:.2e}"),
    ))
}

fn weight_update_oracle() -> Verdict {
    const CASES: usize = 1000;
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5745_4947);
    let mut worst = 0.0_f64;
    let mut ok = 0;
    for _ in 0..CASES {
        let n = rng.gen_range(1..=10);
        let prev = random_simplex(&mut rng, n);
        // Mix coarse grids (ties, like real accuracies) with arbitrary reals.
        let grid = rng.gen_range(2..=20) as f64;
        let coarse = rng.gen_bool(0.5);
        let accs: Vec<f64> = (0..n)
            .map(|_| {
                if coarse {
                    (rng.gen_range(0.0..=grid)).floor() / grid
                } else {
                    rng.gen_range(0.0..1.0)
                }
            })
            .collect();
        let eta = rng.gen_range(0.0..3.0);
        let got = fedsmart_weight_update(
            &PeerWeights {
                owner: 0,
                weights: prev.clone(),
            },
            &RoundAccuracies {
                values: accs.clone(),
            },
            eta,
        )?;
        let want = reference::weight_update(&prev, &accs, eta);
        let err = got
            .weights
            .iter()
            .zip(&want)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err);
        if err <= TOL && got.weights.len() == want.len() {
            ok += 1;
        }
    }
    Ok((
        ok == CASES,
        format!("{ok}/{CASES} within {TOL:e}, worst {worst:.2e}"),
    ))
}

fn round_oracle() -> Verdict {
    const INSTANCES: usize = 20;
    const ROUNDS: u64 = 3;
    const N: usize = 3;
    const DIM: usize = 2;
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(0x414c_4731);
    let mut worst = 0.0_f64;
    let mut ok = 0;
    for _ in 0..INSTANCES {
        let eta = rng.gen_range(0.1..2.0);
        let partitions: Vec<ClientPartition> = (0..N)
            .map(|i| ClientPartition {
                client_id: i,
                train: random_examples(&mut rng, 4, DIM),
                validation: random_examples(&mut rng, 4, DIM),
                distribution_id: 0,
            })
            .collect();
        let validation: Vec<Vec<reference::Labeled>> =
            partitions.iter().map(|p| labeled(&p.validation)).collect();
        let mut ref_models: Vec<Vec<f64>> = (0..N)
            .map(|_| (0..=DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut ref_weights: Vec<Vec<f64>> = (0..N).map(|_| random_simplex(&mut rng, N)).collect();
        let mut state = StrategyState {
            models: ref_models
                .iter()
                .map(|m| ModelParams::from_flat(m))
                .collect::<Result<_>>()?,
            peer_weights: Some(
                ref_weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| PeerWeights {
                        owner: i,
                        weights: w.clone(),
                    })
                    .collect(),
            ),
            round: 0,
            hyper: Hyper {
                eta,
                train: TrainParams {
                    epochs: 1,
                    batch_size: 4,
                    lr: 0.1,
                },
            },
        };
        let mut instance_err = 0.0_f64;
        for _ in 0..ROUNDS {
            let deltas: Vec<Vec<f64>> = (0..N)
                .map(|_| (0..=DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let updates: Vec<ClientUpdate> = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| ClientUpdate {
                    client_id: i,
                    delta: d.clone(),
                    train_size: 4,
                })
                .collect();
            state = fedsmart_round(&state, &updates, &partitions)?;
            (ref_models, ref_weights) =
                reference::fedsmart_round(&ref_models, &ref_weights, &deltas, &validation, eta);
            let weights = state.peer_weights.as_ref().expect("FedSmart keeps weights");
            for i in 0..N {
                for (a, b) in state.models[i].to_flat().iter().zip(&ref_models[i]) {
                    instance_err = instance_err.max((a - b).abs());
                }
                for (a, b) in weights[i].weights.iter().zip(&ref_weights[i]) {
                    instance_err = instance_err.max((a - b).abs());
                }
            }
        }
        worst = worst.max(instance_err);
        if instance_err <= TOL {
            ok += 1;
        }
    }
    Ok((
        ok == INSTANCES,
        format!(
            "{ok}/{INSTANCES} instances ({ROUNDS} rounds each) within {TOL:e}, worst {worst:.2e}"
        ),
    ))
}

fn simplex_invariant() -> Verdict {
    let config = ExperimentConfig::default();
    let bundle = ReportBundle::new(config.clone(), run_experiment(&config)?)?;
    let dir = tempfile::tempdir()?;
    let run_dir = write_bundle(&bundle, dir.path())?;
    let rounds = read_weights_csv(&run_dir.join(WEIGHTS_FILE))?;
    let mut rows = 0;
    let mut bad = 0;
    let mut worst = 0.0_f64;
    for (_, matrix) in &rounds {
        for row in matrix {
            rows += 1;
            let sum: f64 = row.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if row.iter().any(|&w| w.is_nan() || w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                bad += 1;
            }
        }
    }
    let expected = config.rounds as usize * config.n_clients;
    Ok((
        bad == 0 && rows == expected,
        format!("{rows} rows read back ({expected} expected), {bad} off the simplex, worst |sum - 1| {worst:.1e}"),
    ))
}

/// Final-round records of the default configuration per strategy and
/// heterogeneity, computed once and shared by the comparison criteria.
#[derive(Default)]
struct SeedRuns {
    cache: HashMap<(StrategyKind, Heterogeneity), Vec<Vec<RoundRecord>>>,
}

impl SeedRuns {
    fn get(
        &mut self,
        strategy: StrategyKind,
        heterogeneity: Heterogeneity,
    ) -> Result<&[Vec<RoundRecord>]> {
        if let Entry::Vacant(e) = self.cache.entry((strategy, heterogeneity)) {
            let base = ExperimentConfig {
                heterogeneity,
                ..ExperimentConfig::default()
            };
            let report = run_sweep(&base, &[strategy], &SEEDS)?;
            let runs = report
                .runs
                .into_iter()
                .map(|run| {
                    run.outcome.map_err(|e| Error::Run {
                        strategy: run.strategy.to_string(),
                        seed: run.seed,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            e.insert(runs);
        }
        Ok(&self.cache[&(strategy, heterogeneity)])
    }

    fn final_means(
        &mut self,
        strategy: StrategyKind,
        heterogeneity: Heterogeneity,
    ) -> Result<Vec<f64>> {
        Ok(self
            .get(strategy, heterogeneity)?
            .iter()
            .map(|records| {
                let acc = &records.last().expect("rounds >= 1").per_client_val_accuracy;
                acc.iter().sum::<f64>() / acc.len() as f64
            })
            .collect())
    }
}

fn fmt_list<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn pairing_emergence(runs: &mut SeedRuns) -> Verdict {
    let config = ExperimentConfig::default();
    let counts: Vec<usize> = runs
        .get(StrategyKind::FedSmart, Heterogeneity::PairedNonIid)?
        .iter()
        .map(|records| match pairing_indicator(&config, records) {
            Pairing::Measured {
                clients_correct, ..
            } => clients_correct,
            Pairing::NotApplicable => 0,
        })
        .collect();
    let full = counts.iter().filter(|&&c| c == config.n_clients).count();
    Ok((
        full >= 7,
        format!(
            "all {} clients paired in {full}/{} seeds (need 7); per seed: {}",
            config.n_clients,
            SEEDS.len(),
            fmt_list(counts)
        ),
    ))
}

fn beats_local(runs: &mut SeedRuns) -> Verdict {
    let smart = runs.final_means(StrategyKind::FedSmart, Heterogeneity::PairedNonIid)?;
    let local = runs.final_means(StrategyKind::Local, Heterogeneity::PairedNonIid)?;
    let wins = smart.iter().zip(&local).filter(|(s, l)| s > l).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((
        wins >= 8 && mean(&smart) > mean(&local),
        format!(
            "FedSmart wins {wins}/{} seeds (need 8); mean {:.4} vs {:.4}; margins: {}",
            SEEDS.len(),
            mean(&smart),
            mean(&local),
            fmt_list(
                smart
                    .iter()
                    .zip(&local)
                    .map(|(s, l)| format!("{:+.4}", s - l))
            )
        ),
    ))
}

fn versus_fedavg(runs: &mut SeedRuns) -> Verdict {
    let smart = runs.final_means(StrategyKind::FedSmart, Heterogeneity::PairedNonIid)?;
    let avg = runs.final_means(StrategyKind::FedAvg, Heterogeneity::PairedNonIid)?;
    let smart_iid = runs.final_means(StrategyKind::FedSmart, Heterogeneity::Iid)?;
    let avg_iid = runs.final_means(StrategyKind::FedAvg, Heterogeneity::Iid)?;
    let count = |f: &dyn Fn(usize) -> bool| (0..SEEDS.len()).filter(|&k| f(k)).count();
    let non_iid_wins = count(&|k| smart[k] >= avg[k]);
    let iid_close = count(&|k| (smart_iid[k] - avg_iid[k]).abs() <= 0.02);
    let smart_iid_better = count(&|k| smart_iid[k] >= smart[k]);
    let avg_iid_better = count(&|k| avg_iid[k] >= avg[k]);
    Ok((
        non_iid_wins >= 8 && iid_close >= 8 && smart_iid_better >= 8 && avg_iid_better >= 8,
        format!(
            "non-IID FedSmart >= FedAvg in {non_iid_wins}/10; IID within 2 points in {iid_close}/10; \
             IID >= non-IID for FedSmart in {smart_iid_better}/10 and FedAvg in {avg_iid_better}/10 (need 8 each)"
        ),
    ))
}

fn same_bytes(a: &Path, b: &Path, files: &[&str]) -> Result<Vec<String>> {
    let mut differing = Vec::new();
    for file in files {
        if fs::read(a.join(file))? != fs::read(b.join(file))? {
            differing.push(file.to_string());
        }
    }
    Ok(differing)
}

fn determinism() -> Verdict {
    let root_a = tempfile::tempdir()?;
    let root_b = tempfile::tempdir()?;
    let mut differing = Vec::new();
    for &strategy in StrategyKind::ALL {
        let config = ExperimentConfig {
            strategy,
            ..ExperimentConfig::default()
        };
        let a = write_bundle(
            &ReportBundle::new(config.clone(), run_experiment(&config)?)?,
            root_a.path(),
        )?;
        let b = write_bundle(
            &ReportBundle::new(config.clone(), run_experiment(&config)?)?,
            root_b.path(),
        )?;
        for file in same_bytes(&a, &b, &[ACCURACY_FILE, WEIGHTS_FILE, SUMMARY_FILE])? {
            differing.push(format!("{strategy}/{file}"));
        }
    }
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!(
                "{} strategies, two runs each, identical files",
                StrategyKind::ALL.len()
            )
        } else {
            format!("files differ: {}", differing.join(", "))
        },
    ))
}

fn transport_equivalence() -> Verdict {
    let root_a = tempfile::tempdir()?;
    let root_b = tempfile::tempdir()?;
    let in_process = ExperimentConfig::default();
    let tcp = ExperimentConfig {
        transport: TransportKind::Tcp,
        ..in_process.clone()
    };
    let a_bundle = ReportBundle::new(in_process.clone(), run_experiment(&in_process)?)?;
    let b_bundle = ReportBundle::new(tcp.clone(), run_experiment(&tcp)?)?;
    let a = write_bundle(&a_bundle, root_a.path())?;
    let b = write_bundle(&b_bundle, root_b.path())?;
    let differing = same_bytes(&a, &b, &[ACCURACY_FILE, WEIGHTS_FILE])?;
    let summaries_match = a_bundle.summary == b_bundle.summary;
    Ok((
        differing.is_empty() && summaries_match,
        if differing.is_empty() && summaries_match {
            "accuracy.csv, weights.csv and summary identical over localhost TCP".to_string()
        } else {
            format!(
                "differs: {} (summary match: {summaries_match})",
                differing.join(", ")
            )
        },
    ))
}

fn equal_accuracy_fixed_point() -> Verdict {
    const CASES: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x4649_5850);
    let mut ok = 0;
    for _ in 0..CASES {
        let n = rng.gen_range(1..=12);
        let prev = PeerWeights {
            owner: 0,
            weights: random_simplex(&mut rng, n),
        };
        let acc = if rng.gen_bool(0.5) {
            f64::from(rng.gen_range(0..=875)) / 875.0
        } else {
            rng.gen_range(0.0..=1.0)
        };
        let eta = rng.gen_range(0.0..10.0);
        let next = fedsmart_weight_update(
            &prev,
            &RoundAccuracies {
                values: vec![acc; n],
            },
            eta,
        )?;
        if next.weights.len() == n
            && next
                .weights
                .iter()
                .zip(&prev.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
        {
            ok += 1;
        }
    }
    Ok((
        ok == CASES,
        format!("{ok}/{CASES} random cases unchanged bitwise"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_criteria_pass() {
        for outcome in run_selected(&[1, 2, 3, 10]).unwrap() {
            assert!(outcome.check_passed, "{outcome}");
        }
    }

    #[test]
    fn unknown_criterion_rejected() {
        assert!(matches!(run_selected(&[11]), Err(Error::Config(_))));
    }

    #[test]
    fn outcome_line_reports_budget() {
        let outcome = Outcome {
            id: 4,
            title: "x",
            check_passed: true,
            detail: "fine".into(),
            elapsed: Duration::from_secs(2),
            limit: Duration::from_secs(1),
        };
        assert!(!outcome.passed());
        assert!(outcome
            .to_string()
            .starts_with("[FAIL] criterion  4 x: fine"));
        assert!(outcome.to_string().contains("over budget"));
    }
}
