//! CSV and JSON artifacts for finished runs and sweeps.
//!
//! Reals are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces the in-memory values bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Heterogeneity, StrategyKind};
use crate::data::pair_of;
use crate::engine::{ClientRoundRecord, RoundRecord, SweepReport};
use crate::error::{contract, Error, Result};

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.json";

/// Final-round accuracy of every client plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_round: u64,
    pub final_accuracy: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_records(records: &[RoundRecord]) -> Result<Self> {
        let last = records
            .last()
            .ok_or_else(|| contract("a summary needs at least one round"))?;
        let acc = &last.per_client_val_accuracy;
        if acc.is_empty() {
            return Err(contract("a summary needs at least one client"));
        }
        Ok(Summary {
            final_round: last.round,
            final_accuracy: acc.clone(),
            mean: acc.iter().sum::<f64>() / acc.len() as f64,
            min: acc.iter().copied().fold(f64::INFINITY, f64::min),
            max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Whether each client's strongest peer is its pair-mate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Pairing {
    NotApplicable,
    Measured {
        clients_correct: usize,
        clients: usize,
        all_correct: bool,
    },
}

/// True when `row`'s largest off-diagonal weight belongs to `pair` alone.
pub fn points_at_pair(row: &[f64], owner: usize, pair: usize) -> bool {
    row.iter()
        .enumerate()
        .filter(|&(j, _)| j != owner && j != pair)
        .all(|(_, &w)| w < row[pair])
}

/// Pairing indicator of a finished run. Only FedSmart runs on paired data
/// with an even client count are measured.
pub fn pairing_indicator(config: &ExperimentConfig, records: &[RoundRecord]) -> Pairing {
    let n = config.n_clients;
    let applicable = config.strategy == StrategyKind::FedSmart
        && config.heterogeneity == Heterogeneity::PairedNonIid
        && n >= 2
        && n.is_multiple_of(2);
    match records.last() {
        Some(last) if applicable && last.weight_matrix.len() == n => {
            let clients_correct = last
                .weight_matrix
                .iter()
                .enumerate()
                .filter(|&(i, row)| points_at_pair(row, i, pair_of(n, i)))
                .count();
            Pairing::Measured {
                clients_correct,
                clients: n,
                all_correct: clients_correct == n,
            }
        }
        _ => Pairing::NotApplicable,
    }
}

/// Everything persisted for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub config_snapshot: ExperimentConfig,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

impl ReportBundle {
    pub fn new(config: ExperimentConfig, records: Vec<RoundRecord>) -> Result<Self> {
        let summary = Summary::from_records(&records)?;
        Ok(ReportBundle {
            config_snapshot: config,
            records,
            summary,
        })
    }

    /// Directory name of this run inside an output root.
    pub fn run_dir_name(&self) -> String {
        format!(
            "{}_{}",
            self.config_snapshot.strategy, self.config_snapshot.master_seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pairing: Pairing,
    pub mean_final_accuracy: BTreeMap<String, f64>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDocument {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub metrics: Metrics,
}

impl SummaryDocument {
    pub fn from_bundle(bundle: &ReportBundle) -> Self {
        let config = bundle.config_snapshot.clone();
        let mut mean_final_accuracy = BTreeMap::new();
        mean_final_accuracy.insert(config.strategy.to_string(), bundle.summary.mean);
        SummaryDocument {
            metrics: Metrics {
                pairing: pairing_indicator(&config, &bundle.records),
                mean_final_accuracy,
            },
            summary: bundle.summary.clone(),
            config,
        }
    }
}

fn check_records(records: &[RoundRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(contract("cannot write a report without rounds"));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => Ok(fs::create_dir_all(dir)?),
        _ => Ok(()),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    ensure_parent(path)?;
    Ok(csv::Writer::from_path(path)?)
}

/// Writes `round,client_id,val_accuracy,val_loss`, one row per client per
/// round.
pub fn write_accuracy_csv(bundle: &ReportBundle, path: &Path) -> Result<()> {
    check_records(&bundle.records)?;
    let mut w = writer(path)?;
    w.write_record(["round", "client_id", "val_accuracy", "val_loss"])?;
    for r in &bundle.records {
        for (i, (acc, loss)) in r
            .per_client_val_accuracy
            .iter()
            .zip(&r.per_client_val_loss)
            .enumerate()
        {
            w.write_record([
                r.round.to_string(),
                i.to_string(),
                acc.to_string(),
                loss.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `round,owner_id,peer_id,weight`, n² rows per round.
pub fn write_weights_csv(bundle: &ReportBundle, path: &Path) -> Result<()> {
    check_records(&bundle.records)?;
    let mut w = writer(path)?;
    w.write_record(["round", "owner_id", "peer_id", "weight"])?;
    for r in &bundle.records {
        for (owner, row) in r.weight_matrix.iter().enumerate() {
            for (peer, weight) in row.iter().enumerate() {
                w.write_record([
                    r.round.to_string(),
                    owner.to_string(),
                    peer.to_string(),
                    weight.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_summary_json(bundle: &ReportBundle, path: &Path) -> Result<()> {
    check_records(&bundle.records)?;
    write_json(&SummaryDocument::from_bundle(bundle), path)
}

/// Writes the three run files under `<root>/<strategy>_<seed>/` and returns
/// that directory.
pub fn write_bundle(bundle: &ReportBundle, root: &Path) -> Result<PathBuf> {
    let dir = root.join(bundle.run_dir_name());
    fs::create_dir_all(&dir)?;
    write_accuracy_csv(bundle, &dir.join(ACCURACY_FILE))?;
    write_weights_csv(bundle, &dir.join(WEIGHTS_FILE))?;
    write_summary_json(bundle, &dir.join(SUMMARY_FILE))?;
    Ok(dir)
}

/// Writes one distributed client's metrics under `<root>/client_<id>/` in
/// the single-run file formats, restricted to that client's rows.
pub fn write_client_records(
    client_id: usize,
    records: &[ClientRoundRecord],
    root: &Path,
) -> Result<PathBuf> {
    if records.is_empty() {
        return Err(contract("cannot write a report without rounds"));
    }
    let dir = root.join(format!("client_{client_id}"));
    fs::create_dir_all(&dir)?;
    let mut w = writer(&dir.join(ACCURACY_FILE))?;
    w.write_record(["round", "client_id", "val_accuracy", "val_loss"])?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            client_id.to_string(),
            r.val_accuracy.to_string(),
            r.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = writer(&dir.join(WEIGHTS_FILE))?;
    w.write_record(["round", "owner_id", "peer_id", "weight"])?;
    for r in records {
        for (peer, weight) in r.weights.iter().enumerate() {
            w.write_record([
                r.round.to_string(),
                client_id.to_string(),
                peer.to_string(),
                weight.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(dir)
}

#[derive(Debug, Deserialize)]
struct AccuracyRow {
    round: u64,
    client_id: usize,
    val_accuracy: f64,
    val_loss: f64,
}

#[derive(Debug, Deserialize)]
struct WeightRow {
    round: u64,
    owner_id: usize,
    peer_id: usize,
    weight: f64,
}

fn bad_layout(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {detail}", path.display()))
}

/// Reads an accuracy CSV back into records with empty weight matrices.
pub fn read_accuracy_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut records: Vec<RoundRecord> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: AccuracyRow = row?;
        if records.last().is_none_or(|r| r.round != row.round) {
            records.push(RoundRecord {
                round: row.round,
                per_client_val_accuracy: Vec::new(),
                per_client_val_loss: Vec::new(),
                weight_matrix: Vec::new(),
            });
        }
        let record = records.last_mut().expect("pushed above");
        if row.client_id != record.per_client_val_accuracy.len() {
            return Err(bad_layout(
                path,
                format_args!(
                    "round {} lists client {} out of order",
                    row.round, row.client_id
                ),
            ));
        }
        record.per_client_val_accuracy.push(row.val_accuracy);
        record.per_client_val_loss.push(row.val_loss);
    }
    Ok(records)
}

/// Reads a weights CSV back as `(round, matrix)` pairs.
pub fn read_weights_csv(path: &Path) -> Result<Vec<(u64, Vec<Vec<f64>>)>> {
    let mut rounds: Vec<(u64, Vec<Vec<f64>>)> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize() {
        let row: WeightRow = row?;
        if rounds.last().is_none_or(|(r, _)| *r != row.round) {
            rounds.push((row.round, Vec::new()));
        }
        let matrix = &mut rounds.last_mut().expect("pushed above").1;
        if row.peer_id == 0 {
            if row.owner_id != matrix.len() {
                return Err(bad_layout(
                    path,
                    format_args!(
                        "round {} lists owner {} out of order",
                        row.round, row.owner_id
                    ),
                ));
            }
            matrix.push(Vec::new());
        }
        let owners = matrix.len();
        match matrix.last_mut() {
            Some(r) if owners - 1 == row.owner_id && r.len() == row.peer_id => r.push(row.weight),
            _ => {
                return Err(bad_layout(
                    path,
                    format_args!(
                        "round {} lists owner {} peer {} out of order",
                        row.round, row.owner_id, row.peer_id
                    ),
                ))
            }
        }
    }
    Ok(rounds)
}

/// Reads a run directory written by [`write_bundle`].
pub fn read_bundle(dir: &Path) -> Result<ReportBundle> {
    let mut records = read_accuracy_csv(&dir.join(ACCURACY_FILE))?;
    let weights = read_weights_csv(&dir.join(WEIGHTS_FILE))?;
    if weights.len() != records.len() {
        return Err(bad_layout(
            dir,
            "accuracy and weight files cover different rounds",
        ));
    }
    for (record, (round, matrix)) in records.iter_mut().zip(weights) {
        if record.round != round {
            return Err(bad_layout(
                dir,
                "accuracy and weight files cover different rounds",
            ));
        }
        record.weight_matrix = matrix;
    }
    let doc: SummaryDocument = serde_json::from_str(&fs::read_to_string(dir.join(SUMMARY_FILE))?)?;
    Ok(ReportBundle {
        config_snapshot: doc.config,
        records,
        summary: doc.summary,
    })
}

/// Writes one row per successful run and round:
/// `strategy,seed,round,mean_val_accuracy,min_val_accuracy,max_val_accuracy,mean_val_loss`.
pub fn write_sweep_csv(report: &SweepReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "strategy",
        "seed",
        "round",
        "mean_val_accuracy",
        "min_val_accuracy",
        "max_val_accuracy",
        "mean_val_loss",
    ])?;
    for row in report.rows() {
        w.write_record([
            row.strategy.to_string(),
            row.seed.to_string(),
            row.round.to_string(),
            row.mean_val_accuracy.to_string(),
            row.min_val_accuracy.to_string(),
            row.max_val_accuracy.to_string(),
            row.mean_val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRunSummary {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub mean_final_accuracy: Option<f64>,
    pub pairing: Pairing,
    pub error: Option<String>,
}

/// Contents of `sweep_summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryDocument {
    pub base_config: ExperimentConfig,
    pub runs: Vec<SweepRunSummary>,
    /// Mean over seeds of each strategy's mean final accuracy, successful
    /// runs only.
    pub mean_final_accuracy: BTreeMap<String, f64>,
}

impl SweepSummaryDocument {
    pub fn from_report(report: &SweepReport) -> Result<Self> {
        let mut runs = Vec::with_capacity(report.runs.len());
        let mut per_strategy: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for run in &report.runs {
            let config = report.config_for(run.strategy, run.seed);
            runs.push(match &run.outcome {
                Ok(records) => {
                    let mean = Summary::from_records(records)?.mean;
                    per_strategy
                        .entry(run.strategy.to_string())
                        .or_default()
                        .push(mean);
                    SweepRunSummary {
                        strategy: run.strategy,
                        seed: run.seed,
                        mean_final_accuracy: Some(mean),
                        pairing: pairing_indicator(&config, records),
                        error: None,
                    }
                }
                Err(e) => SweepRunSummary {
                    strategy: run.strategy,
                    seed: run.seed,
                    mean_final_accuracy: None,
                    pairing: Pairing::NotApplicable,
                    error: Some(e.to_string()),
                },
            });
        }
        Ok(SweepSummaryDocument {
            base_config: report.base.clone(),
            runs,
            mean_final_accuracy: per_strategy
                .into_iter()
                .map(|(k, v)| {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    (k, mean)
                })
                .collect(),
        })
    }
}

pub fn write_sweep_summary_json(report: &SweepReport, path: &Path) -> Result<()> {
    write_json(&SweepSummaryDocument::from_report(report)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::run_experiment;

    fn record(round: u64, acc: Vec<f64>, weights: Vec<Vec<f64>>) -> RoundRecord {
        RoundRecord {
            round,
            per_client_val_loss: acc.iter().map(|a| 1.0 - a).collect(),
            per_client_val_accuracy: acc,
            weight_matrix: weights,
        }
    }

    fn uniform(n: usize) -> Vec<Vec<f64>> {
        vec![vec![1.0 / n as f64; n]; n]
    }

    fn bundle_2x3() -> ReportBundle {
        let records = vec![
            record(0, vec![0.5, 0.1 + 0.2, 2.0 / 3.0], uniform(3)),
            record(1, vec![0.75, 1e-17, 0.999_999_999_999], uniform(3)),
        ];
        ReportBundle::new(ExperimentConfig::default(), records).unwrap()
    }

    #[test]
    fn accuracy_csv_rows_and_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acc.csv");
        let bundle = bundle_2x3();
        write_accuracy_csv(&bundle, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "round,client_id,val_accuracy,val_loss");
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[6].starts_with("1,2,"));

        let back = read_accuracy_csv(&path).unwrap();
        for (a, b) in back.iter().zip(&bundle.records) {
            assert_eq!(a.round, b.round);
            for (x, y) in a
                .per_client_val_accuracy
                .iter()
                .zip(&b.per_client_val_accuracy)
            {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.per_client_val_loss.iter().zip(&b.per_client_val_loss) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_records_rejected() {
        assert!(matches!(
            ReportBundle::new(ExperimentConfig::default(), vec![]),
            Err(Error::Contract(_))
        ));
        let bundle = ReportBundle {
            config_snapshot: ExperimentConfig::default(),
            records: vec![],
            summary: bundle_2x3().summary,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(write_accuracy_csv(&bundle, &dir.path().join("a.csv")).is_err());
        assert!(write_weights_csv(&bundle, &dir.path().join("w.csv")).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_accuracy_csv(&bundle_2x3(), &blocker.join("acc.csv")).unwrap_err();
        assert!(matches!(err, Error::Io(_) | Error::Csv(_)), "{err:?}");
    }

    #[test]
    fn summary_recomputes_from_last_record() {
        let bundle = bundle_2x3();
        let last = &bundle.records[1].per_client_val_accuracy;
        let mut sum = 0.0;
        for a in last {
            sum += a;
        }
        assert_eq!(bundle.summary.mean, sum / 3.0);
        assert_eq!(bundle.summary.min, 1e-17);
        assert_eq!(bundle.summary.max, 0.999_999_999_999);
        assert_eq!(bundle.summary.final_round, 1);
    }

    #[test]
    fn full_run_round_trips_through_files() {
        let config = ExperimentConfig {
            rounds: 5,
            samples_per_client: 400,
            ..ExperimentConfig::default()
        };
        let records = run_experiment(&config).unwrap();
        let bundle = ReportBundle::new(config, records).unwrap();
        let root = tempfile::tempdir().unwrap();
        let dir = write_bundle(&bundle, root.path()).unwrap();
        assert_eq!(dir, root.path().join("fedsmart_1"));

        let weights_text = fs::read_to_string(dir.join(WEIGHTS_FILE)).unwrap();
        assert_eq!(weights_text.lines().count(), 1 + 36 * 5);
        let back = read_bundle(&dir).unwrap();
        assert_eq!(back, bundle);
        for (round, matrix) in read_weights_csv(&dir.join(WEIGHTS_FILE)).unwrap() {
            for row in matrix {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "round {round}");
            }
        }
    }

    #[test]
    fn uniform_strategies_write_one_over_n() {
        let config = ExperimentConfig {
            rounds: 2,
            samples_per_client: 200,
            strategy: StrategyKind::FedAvg,
            ..ExperimentConfig::default()
        };
        let bundle = ReportBundle::new(config.clone(), run_experiment(&config).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_weights_csv(&bundle, &path).unwrap();
        for (_, matrix) in read_weights_csv(&path).unwrap() {
            assert!(matrix.iter().flatten().all(|&w| w == 1.0 / 6.0));
        }
    }

    #[test]
    fn summary_json_round_trips_config() {
        let bundle = bundle_2x3();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        write_summary_json(&bundle, &path).unwrap();
        let doc: SummaryDocument =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc.config, bundle.config_snapshot);
        assert_eq!(doc.summary, bundle.summary);
        assert_eq!(
            doc.metrics.mean_final_accuracy["fedsmart"],
            bundle.summary.mean
        );
    }

    #[test]
    fn pairing_indicator_cases() {
        let n1 = ExperimentConfig {
            n_clients: 1,
            heterogeneity: Heterogeneity::Iid,
            ..ExperimentConfig::default()
        };
        let one = vec![record(0, vec![0.5], vec![vec![1.0]])];
        assert_eq!(pairing_indicator(&n1, &one), Pairing::NotApplicable);

        let fedavg = ExperimentConfig {
            strategy: StrategyKind::FedAvg,
            ..ExperimentConfig::default()
        };
        let six = vec![record(0, vec![0.5; 6], uniform(6))];
        assert_eq!(pairing_indicator(&fedavg, &six), Pairing::NotApplicable);

        // Uniform rows have no strict maximum, so no client points at its pair.
        let config = ExperimentConfig::default();
        assert_eq!(
            pairing_indicator(&config, &six),
            Pairing::Measured {
                clients_correct: 0,
                clients: 6,
                all_correct: false
            }
        );

        let mut paired = uniform(6);
        for (i, row) in paired.iter_mut().enumerate() {
            row.iter_mut().for_each(|w| *w = 0.05);
            row[i] = 0.5;
            row[(i + 3) % 6] = 0.3;
        }
        paired[5] = vec![0.1, 0.4, 0.1, 0.1, 0.1, 0.2];
        let recs = vec![record(0, vec![0.5; 6], paired)];
        assert_eq!(
            pairing_indicator(&config, &recs),
            Pairing::Measured {
                clients_correct: 5,
                clients: 6,
                all_correct: false
            }
        );
    }

    #[test]
    fn points_at_pair_ignores_the_diagonal() {
        assert!(points_at_pair(&[0.9, 0.02, 0.08], 0, 2));
        assert!(!points_at_pair(&[0.2, 0.4, 0.4], 0, 2));
        assert!(points_at_pair(&[0.0, 1.0], 0, 1));
    }

    #[test]
    fn client_records_use_run_file_formats() {
        let records = vec![
            ClientRoundRecord {
                round: 0,
                val_accuracy: 0.5,
                val_loss: 0.7,
                weights: vec![0.25, 0.75],
            },
            ClientRoundRecord {
                round: 1,
                val_accuracy: 0.75,
                val_loss: 0.6,
                weights: vec![0.5, 0.5],
            },
        ];
        let root = tempfile::tempdir().unwrap();
        let dir = write_client_records(1, &records, root.path()).unwrap();
        assert!(dir.ends_with("client_1"));
        let acc = fs::read_to_string(dir.join(ACCURACY_FILE)).unwrap();
        assert_eq!(
            acc,
            "round,client_id,val_accuracy,val_loss\n0,1,0.5,0.7\n1,1,0.75,0.6\n"
        );
        let text = fs::read_to_string(dir.join(WEIGHTS_FILE)).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("0,1,1,0.75"));
        assert!(write_client_records(0, &[], root.path()).is_err());
    }
}
