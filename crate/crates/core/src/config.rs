//! Experiment configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainParams;

/// Number of features per example (gender, age, eight drug indicators).
pub const FEATURE_DIM: usize = 10;

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name).to_lowercase(),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(
    /// Aggregation strategy driven by the round loop.
    StrategyKind {
        FedSmart => "fedsmart",
        FedAvg => "fedavg",
        FedSgd => "fedsgd",
        LoAdaBoost => "loadaboost",
        Local => "local",
        Centralized => "centralized",
    }
);

named_enum!(
    /// How client datasets relate to each other.
    Heterogeneity {
        Iid => "iid",
        PairedNonIid => "paired_noniid",
    }
);

named_enum!(
    TransportKind {
        InProcess => "inprocess",
        Tcp => "tcp",
    }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_clients: usize,
    pub rounds: u64,
    /// Validation share carved from every client's data.
    pub alpha: f64,
    /// Step size of the peer-weight update (not the SGD learning rate).
    pub eta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub samples_per_client: usize,
    pub upsample_factor: usize,
    pub strategy: StrategyKind,
    pub master_seed: u64,
    pub heterogeneity: Heterogeneity,
    pub transport: TransportKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_clients: 6,
            rounds: 100,
            alpha: 0.25,
            eta: 0.5,
            lr: 0.1,
            epochs: 1,
            batch_size: 32,
            samples_per_client: 3500,
            upsample_factor: 3,
            strategy: StrategyKind::FedSmart,
            master_seed: 1,
            heterogeneity: Heterogeneity::PairedNonIid,
            transport: TransportKind::InProcess,
        }
    }
}

/// Field names accepted in config files and `--set` overrides, in
/// declaration order.
pub const CONFIG_KEYS: &[&str] = &[
    "n_clients",
    "rounds",
    "alpha",
    "eta",
    "lr",
    "epochs",
    "batch_size",
    "samples_per_client",
    "upsample_factor",
    "strategy",
    "master_seed",
    "heterogeneity",
    "transport",
];

fn parse_field<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("invalid value `{value}` for `{key}`: {e}")))
}

impl ExperimentConfig {
    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "n_clients" => self.n_clients = parse_field("n_clients", value)?,
            "rounds" => self.rounds = parse_field("rounds", value)?,
            "alpha" => self.alpha = parse_field("alpha", value)?,
            "eta" => self.eta = parse_field("eta", value)?,
            "lr" => self.lr = parse_field("lr", value)?,
            "epochs" => self.epochs = parse_field("epochs", value)?,
            "batch_size" => self.batch_size = parse_field("batch_size", value)?,
            "samples_per_client" => {
                self.samples_per_client = parse_field("samples_per_client", value)?
            }
            "upsample_factor" => self.upsample_factor = parse_field("upsample_factor", value)?,
            "strategy" => self.strategy = value.parse()?,
            "master_seed" => self.master_seed = parse_field("master_seed", value)?,
            "heterogeneity" => self.heterogeneity = value.parse()?,
            "transport" => self.transport = value.parse()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key `{other}` (valid keys: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "override `{assignment}` is not of the form key=value"
            ))
        })?;
        self.set(key, value)
    }

    /// Parses a flat config file body on top of the defaults. Blank lines and
    /// `#` comments are ignored; later keys win.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.split_once('#') {
                Some((before, _)) => before,
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    lineno + 1
                ))
            })?;
            config
                .set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_kv_str(&text)
    }

    /// Renders the config in the file format accepted by [`Self::from_kv_str`].
    pub fn to_kv_string(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|key| format!("{key} = {}\n", self.get(key).expect("known key")))
            .collect()
    }

    /// Textual value of a field, as it would appear in a config file.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_clients" => self.n_clients.to_string(),
            "rounds" => self.rounds.to_string(),
            "alpha" => self.alpha.to_string(),
            "eta" => self.eta.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "samples_per_client" => self.samples_per_client.to_string(),
            "upsample_factor" => self.upsample_factor.to_string(),
            "strategy" => self.strategy.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "heterogeneity" => self.heterogeneity.to_string(),
            "transport" => self.transport.to_string(),
            _ => return None,
        })
    }

    /// Checks every field against its domain.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_clients == 0 {
            return fail("n_clients must be at least 1".into());
        }
        if self.heterogeneity == Heterogeneity::PairedNonIid && !self.n_clients.is_multiple_of(2) {
            return fail(format!(
                "paired_noniid needs an even number of clients, got {}",
                self.n_clients
            ));
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return fail(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.samples_per_client < 2 {
            return fail("samples_per_client must be at least 2".into());
        }
        if self.upsample_factor == 0 {
            return fail("upsample_factor must be at least 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments_and_overrides() {
        let text = "# experiment\nstrategy = fedavg\nrounds=5   # short\n\nalpha = 0.3\n";
        let mut cfg = ExperimentConfig::from_kv_str(text).unwrap();
        assert_eq!(cfg.strategy, StrategyKind::FedAvg);
        assert_eq!(cfg.rounds, 5);
        assert_eq!(cfg.alpha, 0.3);
        assert_eq!(cfg.n_clients, 6);
        cfg.apply_override("strategy=local").unwrap();
        assert_eq!(cfg.strategy, StrategyKind::Local);
    }

    #[test]
    fn kv_rendering_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.lr = 0.1 + 0.2;
        cfg.heterogeneity = Heterogeneity::Iid;
        cfg.transport = TransportKind::Tcp;
        let back = ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(ExperimentConfig::from_kv_str("colour = red").is_err());
        assert!(ExperimentConfig::from_kv_str("strategy = fedprox").is_err());
        assert!(ExperimentConfig::from_kv_str("rounds = -1").is_err());
        assert!(ExperimentConfig::from_kv_str("just a line").is_err());
        assert!(ExperimentConfig::default()
            .apply_override("rounds")
            .is_err());
    }

    #[test]
    fn validation_checks_domains() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = [
            ("rounds", "0"),
            ("alpha", "1"),
            ("alpha", "0"),
            ("eta", "0"),
            ("lr", "-0.1"),
            ("n_clients", "5"),
            ("n_clients", "0"),
            ("epochs", "0"),
            ("batch_size", "0"),
            ("upsample_factor", "0"),
        ];
        for (key, value) in bad {
            let mut cfg = ExperimentConfig::default();
            cfg.set(key, value).unwrap();
            assert!(cfg.validate().is_err(), "{key}={value} accepted");
        }
        let mut odd_iid = ExperimentConfig::default();
        odd_iid.n_clients = 5;
        odd_iid.heterogeneity = Heterogeneity::Iid;
        assert!(odd_iid.validate().is_ok());
    }
}
