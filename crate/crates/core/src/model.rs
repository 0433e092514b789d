//! Logistic classifier: prediction, cross-entropy, analytic gradient,
//! mini-batch SGD and accuracy.
//!
//! Every function here is a pure function of its arguments. Batch means are
//! accumulated as a plain sum followed by a single division so results are
//! reproducible bit for bit.

use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Clamp applied to probabilities inside the loss so `ln` stays finite.
pub const LOSS_EPS: f64 = 1e-12;

/// Largest `f64` strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Parameters of a logistic classifier over `d` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Flat view `[weights..., bias]` of length `d + 1`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.dim() + 1);
        flat.extend_from_slice(&self.weights);
        flat.push(self.bias);
        flat
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        match flat.split_last() {
            Some((&bias, weights)) => Ok(Self {
                weights: weights.to_vec(),
                bias,
            }),
            None => Err(contract(
                "flat parameter vector must hold at least the bias",
            )),
        }
    }

    /// Returns `self + delta` where `delta` is a flat `d + 1` vector.
    pub fn add_delta(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.dim() + 1 {
            return Err(contract(format!(
                "delta has length {}, expected {}",
                delta.len(),
                self.dim() + 1
            )));
        }
        let weights = self.weights.iter().zip(delta).map(|(w, d)| w + d).collect();
        Ok(Self {
            weights,
            bias: self.bias + delta[self.dim()],
        })
    }

    /// Flat `other - self`.
    pub fn delta_to(&self, other: &ModelParams) -> Vec<f64> {
        let mut delta: Vec<f64> = other
            .weights
            .iter()
            .zip(&self.weights)
            .map(|(b, a)| b - a)
            .collect();
        delta.push(other.bias - self.bias);
        delta
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// One labelled row: `d` features and a binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: u8,
}

impl Example {
    pub fn new(features: Vec<f64>, label: u8) -> Self {
        Self { features, label }
    }

    fn target(&self) -> f64 {
        f64::from(self.label)
    }
}

/// A client's parameter change for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Flat `[weights..., bias]` delta.
    pub delta: Vec<f64>,
    pub train_size: usize,
}

/// SGD hyperparameters shared by every local trainer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

fn logit(params: &ModelParams, features: &[f64]) -> f64 {
    params
        .weights
        .iter()
        .zip(features)
        .fold(params.bias, |acc, (w, x)| acc + w * x)
}

fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

fn check_dim(params: &ModelParams, features: &[f64]) -> Result<()> {
    if features.len() != params.dim() {
        return Err(contract(format!(
            "feature vector has length {}, model expects {}",
            features.len(),
            params.dim()
        )));
    }
    Ok(())
}

/// `sigmoid(weights · features + bias)`, kept strictly inside (0, 1).
pub fn predict_proba(params: &ModelParams, features: &[f64]) -> Result<f64> {
    check_dim(params, features)?;
    Ok(sigmoid(logit(params, features)))
}

fn nonempty(batch: &[Example], what: &str) -> Result<()> {
    if batch.is_empty() {
        return Err(contract(format!("{what} must be nonempty")));
    }
    Ok(())
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1 − ε]`.
pub fn loss(params: &ModelParams, batch: &[Example]) -> Result<f64> {
    nonempty(batch, "loss batch")?;
    let mut total = 0.0;
    for ex in batch {
        let p = predict_proba(params, &ex.features)?.clamp(LOSS_EPS, 1.0 - LOSS_EPS);
        total += if ex.label == 1 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        };
    }
    Ok(total / batch.len() as f64)
}

fn gradient_over<'a>(
    params: &ModelParams,
    batch: impl Iterator<Item = &'a Example>,
) -> Result<Vec<f64>> {
    let dim = params.dim();
    let mut grad = vec![0.0; dim + 1];
    let mut count = 0usize;
    for ex in batch {
        check_dim(params, &ex.features)?;
        let residual = sigmoid(logit(params, &ex.features)) - ex.target();
        for (g, x) in grad.iter_mut().zip(&ex.features) {
            *g += residual * x;
        }
        grad[dim] += residual;
        count += 1;
    }
    if count == 0 {
        return Err(contract("gradient batch must be nonempty"));
    }
    let n = count as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok(grad)
}

/// Mean over the batch of `(p − y) · [features, 1]`.
pub fn gradient(params: &ModelParams, batch: &[Example]) -> Result<Vec<f64>> {
    gradient_over(params, batch.iter())
}

/// `params − lr · grad`.
pub fn sgd_step(params: &ModelParams, grad: &[f64], lr: f64) -> ModelParams {
    let dim = params.dim();
    ModelParams {
        weights: params
            .weights
            .iter()
            .zip(grad)
            .map(|(w, g)| w - lr * g)
            .collect(),
        bias: params.bias - lr * grad[dim],
    }
}

fn check_train(len: usize, hp: &TrainParams) -> Result<()> {
    if len == 0 {
        return Err(contract("training set must be nonempty"));
    }
    if hp.epochs == 0 {
        return Err(contract("epochs must be at least 1"));
    }
    if hp.batch_size == 0 {
        return Err(contract("batch_size must be at least 1"));
    }
    if !(hp.lr >= 0.0 && hp.lr.is_finite()) {
        return Err(contract(format!(
            "learning rate {} is not a finite non-negative value",
            hp.lr
        )));
    }
    Ok(())
}

/// Runs `epochs` passes of mini-batch SGD and returns the final parameters.
///
/// Batch membership follows a per-epoch shuffle drawn from `seed`; inside a
/// batch, examples are visited in their original order, so a single batch
/// covering the whole set reproduces [`gradient`] exactly.
pub fn sgd_train<E: Borrow<Example>>(
    params: &ModelParams,
    train: &[E],
    hp: &TrainParams,
    seed: u64,
) -> Result<ModelParams> {
    check_train(train.len(), hp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut current = params.clone();
    for _ in 0..hp.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hp.batch_size) {
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let grad = gradient_over(&current, batch.iter().map(|&i| train[i].borrow()))?;
            current = sgd_step(&current, &grad, hp.lr);
        }
    }
    Ok(current)
}

/// Local training as seen by the federation: the delta from `params` after
/// [`sgd_train`], tagged with the client's id and training-set size.
pub fn local_train<E: Borrow<Example>>(
    client_id: usize,
    params: &ModelParams,
    train: &[E],
    hp: &TrainParams,
    seed: u64,
) -> Result<ClientUpdate> {
    let trained = sgd_train(params, train, hp, seed)?;
    Ok(ClientUpdate {
        client_id,
        delta: params.delta_to(&trained),
        train_size: train.len(),
    })
}

/// Fraction of examples whose thresholded prediction (`p ≥ 0.5` means 1)
/// matches the label.
pub fn accuracy(params: &ModelParams, data: &[Example]) -> Result<f64> {
    nonempty(data, "evaluation set")?;
    let mut correct = 0usize;
    for ex in data {
        let predicted = u8::from(predict_proba(params, &ex.features)? >= 0.5);
        if predicted == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
