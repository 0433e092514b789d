//! Synthetic client datasets.
//!
//! Rows follow a clinical-records schema: two demographic indicators
//! (gender, age over 65) and eight drug-prescription indicators, all binary,
//! with a binary mortality label. Each latent distribution is a logistic
//! ground truth over those features. Paired non-IID experiments draw clients
//! `i` and `i + n/2` from the same distribution.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Heterogeneity, FEATURE_DIM};
use crate::error::{contract, Error, Result};
use crate::model::Example;
use crate::seed::{derive_seed, DATA_STREAM, SPEC_STREAM, SPLIT_STREAM, UPSAMPLE_STREAM};

/// Target share of positive labels before up-sampling.
pub const POSITIVE_RATE: f64 = 0.25;
/// Label flip probability of every generated distribution.
pub const LABEL_NOISE: f64 = 0.0;

/// Ground-truth generator for one latent client population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub beta: Vec<f64>,
    pub bias: f64,
    /// Bernoulli probability of each binary feature.
    pub feature_marginals: Vec<f64>,
    pub label_noise: f64,
}

impl DistributionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.feature_marginals.len() {
            return Err(contract(format!(
                "beta has {} entries but feature_marginals has {}",
                self.beta.len(),
                self.feature_marginals.len()
            )));
        }
        if let Some(p) = self
            .feature_marginals
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(contract(format!("feature marginal {p} outside [0, 1]")));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(contract(format!(
                "label_noise {} outside [0, 0.5)",
                self.label_noise
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Exact probability of a positive label, by enumerating all binary
    /// feature vectors.
    pub fn positive_rate(&self) -> f64 {
        let d = self.dim();
        let mut rate = 0.0;
        for mask in 0u32..(1 << d) {
            let mut prob = 1.0;
            let mut z = self.bias;
            for j in 0..d {
                let p = self.feature_marginals[j];
                if mask & (1 << j) != 0 {
                    prob *= p;
                    z += self.beta[j];
                } else {
                    prob *= 1.0 - p;
                }
            }
            let s = 1.0 / (1.0 + (-z).exp());
            rate += prob * ((1.0 - self.label_noise) * s + self.label_noise * (1.0 - s));
        }
        rate
    }

    /// Chooses `bias` so that [`Self::positive_rate`] equals `target`.
    fn calibrate_bias(&mut self, target: f64) {
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            self.bias = 0.5 * (lo + hi);
            if self.positive_rate() < target {
                lo = self.bias;
            } else {
                hi = self.bias;
            }
        }
        self.bias = 0.5 * (lo + hi);
    }
}

/// One client's local data after splitting and up-sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub client_id: usize,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub distribution_id: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Draws `n_samples` rows from `spec`: features per their Bernoulli
/// marginals, label from the logistic ground truth, then flipped with
/// probability `label_noise`.
///
/// A feature with a negative coefficient is switched on by the top `p` of
/// its uniform draw rather than the bottom, so a distribution and its
/// sign-reflected counterpart consume randomness in lockstep.
pub fn generate_client_data(
    spec: &DistributionSpec,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    spec.validate()?;
    if n_samples == 0 {
        return Err(contract("n_samples must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n_samples)
        .map(|_| {
            let features: Vec<f64> = spec
                .feature_marginals
                .iter()
                .zip(&spec.beta)
                .map(|(&p, &b)| {
                    let u = rng.gen::<f64>();
                    let on = if b < 0.0 { u >= 1.0 - p } else { u < p };
                    if on {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let z = spec
                .beta
                .iter()
                .zip(&features)
                .fold(spec.bias, |acc, (b, x)| acc + b * x);
            let mut label = u8::from(rng.gen::<f64>() < sigmoid(z));
            if rng.gen::<f64>() < spec.label_noise {
                label ^= 1;
            }
            Example::new(features, label)
        })
        .collect();
    Ok(data)
}

/// Replicates the minority class so its count becomes `factor` times the
/// original, then shuffles. On a tie, class 0 counts as the minority.
pub fn upsample_minority(data: &[Example], factor: usize, seed: u64) -> Result<Vec<Example>> {
    if factor == 0 {
        return Err(contract("up-sampling factor must be at least 1"));
    }
    let positives = data.iter().filter(|e| e.label == 1).count();
    let negatives = data.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateDataset(format!(
            "up-sampling needs both classes, got {negatives} negatives and {positives} positives"
        )));
    }
    let minority = if positives < negatives { 1 } else { 0 };
    let mut out = Vec::with_capacity(data.len() + (factor - 1) * positives.min(negatives));
    out.extend_from_slice(data);
    for _ in 1..factor {
        out.extend(data.iter().filter(|e| e.label == minority).cloned());
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

/// Splits off `max(1, floor(alpha·|data|))` examples as a validation share.
/// Both halves keep the input's relative order.
pub fn split_validation(
    data: &[Example],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if data.len() < 2 {
        return Err(contract(format!(
            "splitting needs at least 2 examples, got {}",
            data.len()
        )));
    }
    let n_val = ((alpha * data.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_val = vec![false; data.len()];
    for &i in &order[..n_val] {
        in_val[i] = true;
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (ex, &val) in data.iter().zip(&in_val) {
        if val {
            validation.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok((train, validation))
}

/// Range of the absolute ground-truth coefficients.
pub const COEFFICIENT_RANGE: (f64, f64) = (6.0, 12.0);
/// Range of the demographic feature marginals.
pub const DEMOGRAPHIC_MARGINALS: (f64, f64) = (0.35, 0.65);
/// Range of the drug-prescription feature marginals.
pub const DRUG_MARGINALS: (f64, f64) = (0.05, 0.3);
const DEMOGRAPHIC_FEATURES: usize = 2;

/// Sign of coefficient `col` in distribution `k` of `count`. Distribution
/// `k` negates the columns congruent to `k` modulo `max(count, 3)`, so
/// distinct distributions disagree on disjoint feature sets.
fn coefficient_sign(k: usize, count: usize, col: usize) -> f64 {
    if col % count.max(3) == k {
        -1.0
    } else {
        1.0
    }
}

/// The latent distributions of an experiment: one for IID runs, `n/2` for
/// paired runs.
///
/// All distributions share coefficient magnitudes and base marginals drawn
/// from the master seed. A negated coefficient comes with the complementary
/// marginal `1 - p`, which makes every distribution a relabelling of the
/// same population: they differ in which features raise mortality, not in
/// how hard they are to learn.
pub fn distribution_specs(config: &ExperimentConfig) -> Vec<DistributionSpec> {
    let count = match config.heterogeneity {
        Heterogeneity::Iid => 1,
        Heterogeneity::PairedNonIid => (config.n_clients / 2).max(1),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.master_seed, &[SPEC_STREAM]));
    let (lo, hi) = COEFFICIENT_RANGE;
    let magnitudes: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.gen_range(lo..hi)).collect();
    let base: Vec<f64> = (0..FEATURE_DIM)
        .map(|j| {
            let (lo, hi) = if j < DEMOGRAPHIC_FEATURES {
                DEMOGRAPHIC_MARGINALS
            } else {
                DRUG_MARGINALS
            };
            rng.gen_range(lo..hi)
        })
        .collect();
    (0..count)
        .map(|k| {
            let signs: Vec<f64> = (0..FEATURE_DIM)
                .map(|j| coefficient_sign(k, count, j))
                .collect();
            let mut spec = DistributionSpec {
                beta: signs.iter().zip(&magnitudes).map(|(s, m)| s * m).collect(),
                bias: 0.0,
                feature_marginals: signs
                    .iter()
                    .zip(&base)
                    .map(|(&s, &p)| if s > 0.0 { p } else { 1.0 - p })
                    .collect(),
                label_noise: LABEL_NOISE,
            };
            spec.calibrate_bias(POSITIVE_RATE);
            spec
        })
        .collect()
}

/// Which latent distribution client `client_id` draws from.
pub fn distribution_of(config: &ExperimentConfig, client_id: usize) -> usize {
    match config.heterogeneity {
        Heterogeneity::Iid => 0,
        Heterogeneity::PairedNonIid => client_id % (config.n_clients / 2).max(1),
    }
}

/// The designated pair-mate of a client in a paired experiment.
pub fn pair_of(n_clients: usize, client_id: usize) -> usize {
    (client_id + n_clients / 2) % n_clients
}

/// Generates, splits and up-samples one client's partition.
pub fn build_client(
    config: &ExperimentConfig,
    specs: &[DistributionSpec],
    client_id: usize,
) -> Result<ClientPartition> {
    let distribution_id = distribution_of(config, client_id);
    let seed = config.master_seed;
    let id = client_id as u64;
    let data = generate_client_data(
        &specs[distribution_id],
        config.samples_per_client,
        derive_seed(seed, &[DATA_STREAM, id]),
    )?;
    let (train, validation) =
        split_validation(&data, config.alpha, derive_seed(seed, &[SPLIT_STREAM, id]))?;
    let train = if config.upsample_factor > 1 {
        upsample_minority(
            &train,
            config.upsample_factor,
            derive_seed(seed, &[UPSAMPLE_STREAM, id]),
        )?
    } else {
        train
    };
    Ok(ClientPartition {
        client_id,
        train,
        validation,
        distribution_id,
    })
}

/// Builds every client's partition. In paired mode clients `i` and
/// `i + n/2` share a distribution; the result depends only on the data
/// fields of `config` and its master seed.
pub fn build_paired_clients(config: &ExperimentConfig) -> Result<Vec<ClientPartition>> {
    if config.heterogeneity == Heterogeneity::PairedNonIid && !config.n_clients.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "paired clients need an even client count, got {}",
            config.n_clients
        )));
    }
    let specs = distribution_specs(config);
    (0..config.n_clients)
        .map(|i| build_client(config, &specs, i))
        .collect()
}

/// Writes a partition as CSV with columns `feature_0..feature_{d-1},label,split`.
pub fn write_partition_csv(partition: &ClientPartition, path: &Path) -> Result<()> {
    let dim = partition
        .train
        .first()
        .or(partition.validation.first())
        .map_or(FEATURE_DIM, |e| e.features.len());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..dim).map(|j| format!("feature_{j}")).collect();
    header.push("label".into());
    header.push("split".into());
    writer.write_record(&header)?;
    let rows = partition
        .train
        .iter()
        .map(|e| (e, "train"))
        .chain(partition.validation.iter().map(|e| (e, "val")));
    for (ex, split) in rows {
        let mut record: Vec<String> = ex.features.iter().map(|x| x.to_string()).collect();
        record.push(ex.label.to_string());
        record.push(split.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
