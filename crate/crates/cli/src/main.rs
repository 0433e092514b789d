use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim_core::acceptance;
use fedsim_core::data::{build_paired_clients, write_partition_csv};
use fedsim_core::engine::run_remote_client;
use fedsim_core::report::{
    write_bundle, write_client_records, write_sweep_csv, write_sweep_summary_json, SWEEP_FILE,
    SWEEP_SUMMARY_FILE,
};
use fedsim_core::transport::{serve, ServerSetup};
use fedsim_core::{
    run_experiment, run_sweep, Error, ExperimentConfig, ReportBundle, StrategyKind, FEATURE_DIM,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ACCEPTANCE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated-learning simulator",
    after_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write accuracy.csv, weights.csv and summary.json.
    #[command(after_help = config_help())]
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run several strategies over several seeds.
    #[command(after_help = config_help())]
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Master seeds to run.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        seeds: Vec<u64>,
        /// Strategies to run; defaults to the configured strategy.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<StrategyKind>,
    },
    /// Write every client's synthetic partition as CSV.
    #[command(after_help = config_help())]
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Relay updates for clients started with `fedsim client`.
    #[command(after_help = config_help())]
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Run one client against a `fedsim serve` relay.
    #[command(after_help = config_help())]
    Client {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        client_id: usize,
    },
    /// Run the acceptance suite; exits with 3 if any criterion fails.
    Accept {
        /// Criteria to run (default: all).
        ids: Vec<u8>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        for assignment in &self.overrides {
            config.apply_override(assignment)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "FEDSIM_OUTDIR", default_value = "results")]
    outdir: PathBuf,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 7878)]
    port: u16,
}

fn config_help() -> String {
    let defaults = ExperimentConfig::default().to_kv_string();
    let mut text = String::from("Config keys and defaults:\n");
    for line in defaults.lines() {
        text.push_str("  ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&format!(
        "\nStrategies: {}\n\nExit codes: 0 success, 1 configuration or usage error, \
         2 runtime error, 3 acceptance failure",
        StrategyKind::ALL
            .iter()
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    ));
    text
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    })
}

fn print_summary(bundle: &ReportBundle, dir: &Path) {
    let s = &bundle.summary;
    println!(
        "{}: round {} mean accuracy {:.4} (min {:.4}, max {:.4}) -> {}",
        bundle.run_dir_name(),
        s.final_round,
        s.mean,
        s.min,
        s.max,
        dir.display()
    );
}

fn run(config: &ConfigArgs, out: &OutArgs) -> Result<ExitCode, Error> {
    let config = config.load()?;
    let bundle = ReportBundle::new(config.clone(), run_experiment(&config)?)?;
    let dir = write_bundle(&bundle, &out.outdir)?;
    print_summary(&bundle, &dir);
    Ok(ExitCode::SUCCESS)
}

fn sweep(
    config: &ConfigArgs,
    out: &OutArgs,
    seeds: &[u64],
    strategies: &[StrategyKind],
) -> Result<ExitCode, Error> {
    let base = config.load()?;
    let strategies = if strategies.is_empty() {
        vec![base.strategy]
    } else {
        strategies.to_vec()
    };
    let report = run_sweep(&base, &strategies, seeds)?;
    for run in &report.runs {
        if let Ok(records) = &run.outcome {
            let bundle =
                ReportBundle::new(report.config_for(run.strategy, run.seed), records.clone())?;
            let dir = write_bundle(&bundle, &out.outdir)?;
            print_summary(&bundle, &dir);
        }
    }
    write_sweep_csv(&report, &out.outdir.join(SWEEP_FILE))?;
    write_sweep_summary_json(&report, &out.outdir.join(SWEEP_SUMMARY_FILE))?;
    let failures = report.failures();
    for e in &failures {
        eprintln!("error: {e}");
    }
    Ok(if failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_RUNTIME)
    })
}

fn gen_data(config: &ConfigArgs, out: &OutArgs) -> Result<ExitCode, Error> {
    let config = config.load()?;
    for partition in build_paired_clients(&config)? {
        let path = out
            .outdir
            .join(format!("client_{}.csv", partition.client_id));
        write_partition_csv(&partition, &path)?;
        println!(
            "client {}: {} train, {} validation rows (distribution {}) -> {}",
            partition.client_id,
            partition.train.len(),
            partition.validation.len(),
            partition.distribution_id,
            path.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn serve_cmd(config: &ConfigArgs, net: &NetArgs) -> Result<ExitCode, Error> {
    let config = config.load()?;
    let listener = TcpListener::bind((net.host.as_str(), net.port))?;
    println!(
        "listening on {} for {} clients, {} rounds",
        listener.local_addr()?,
        config.n_clients,
        config.rounds
    );
    let setup = ServerSetup {
        n_clients: config.n_clients,
        rounds: config.rounds,
        dim: FEATURE_DIM,
        init: fedsim_core::engine::initial_model(),
    };
    let trace = serve(&listener, &setup)?;
    println!("done: {} events", trace.len());
    Ok(ExitCode::SUCCESS)
}

fn client_cmd(
    config: &ConfigArgs,
    net: &NetArgs,
    out: &OutArgs,
    client_id: usize,
) -> Result<ExitCode, Error> {
    let config = config.load()?;
    let records = run_remote_client(&config, client_id, (net.host.as_str(), net.port))?;
    let dir = write_client_records(client_id, &records, &out.outdir)?;
    if let Some(last) = records.last() {
        println!(
            "client {client_id}: round {} accuracy {:.4} -> {}",
            last.round,
            last.val_accuracy,
            dir.display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn accept(ids: &[u8]) -> Result<ExitCode, Error> {
    let outcomes = if ids.is_empty() {
        acceptance::run_all()
    } else {
        acceptance::run_selected(ids)?
    };
    for outcome in &outcomes {
        println!("{outcome}");
    }
    let passed = outcomes.iter().filter(|o| o.passed()).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    Ok(if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run { config, out } => run(config, out),
        Command::Sweep {
            config,
            out,
            seeds,
            strategies,
        } => sweep(config, out, seeds, strategies),
        Command::GenData { config, out } => gen_data(config, out),
        Command::Serve { config, net } => serve_cmd(config, net),
        Command::Client {
            config,
            net,
            out,
            client_id,
        } => client_cmd(config, net, out, *client_id),
        Command::Accept { ids } => accept(ids),
    };
    result.unwrap_or_else(|e| fail(&e))
}
