//! Client-side training: mini-batch SGD over one user's partition.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{ClientPartition, UserId};
use crate::error::{config_err, usage_err, Result};
use crate::model::{Classifier, Params};
use crate::scalar::Scalar;
use crate::seed;

/// Local batch size. `Full` uses the whole partition as one batch.
///
/// Serialized as a positive integer or the string `"full"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchSize {
    Fixed(usize),
    Full,
}

impl BatchSize {
    /// Effective batch size on a partition of `n` examples.
    pub fn resolve(self, n: usize) -> usize {
        match self {
            BatchSize::Fixed(b) => b,
            BatchSize::Full => n.max(1),
        }
    }
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Fixed(b) => write!(f, "{b}"),
            BatchSize::Full => f.write_str("full"),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Fixed(b) => s.serialize_u64(*b as u64),
            BatchSize::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("batch size must be at least 1")),
            Raw::Num(b) => Ok(BatchSize::Fixed(b)),
            Raw::Text(s) if s == "full" => Ok(BatchSize::Full),
            Raw::Text(s) => {
                Err(serde::de::Error::custom(format!("batch size must be a positive integer or \"full\", got {s:?}")))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTrainingConfig {
    pub epochs: usize,
    pub batch_size: BatchSize,
    pub eta_local: f64,
}

impl LocalTrainingConfig {
    /// One full-batch step per round.
    pub fn fed_sgd(eta_local: f64) -> Self {
        Self { epochs: 1, batch_size: BatchSize::Full, eta_local }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("local epochs must be at least 1"));
        }
        if self.batch_size == BatchSize::Fixed(0) {
            return Err(config_err("local batch size must be at least 1"));
        }
        if !(self.eta_local >= 0.0 && self.eta_local.is_finite()) {
            return Err(config_err("eta_local must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// `E * max(ceil(n_k / B), 1)`.
pub fn local_step_count(n_k: usize, batch: BatchSize, epochs: usize) -> usize {
    let b = batch.resolve(n_k);
    epochs * n_k.div_ceil(b).max(1)
}

/// Weights a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T> {
    pub user_id: UserId,
    pub weights: Params<T>,
    pub example_count: usize,
    /// Mean of the mini-batch losses seen during local training.
    pub train_loss: T,
    pub local_steps: usize,
}

/// Seed of the shuffle for `epoch` of `user` within a round.
pub fn epoch_seed(round_seed: u64, user: UserId, epoch: usize) -> u64 {
    seed::derive(seed::derive(round_seed, seed::stream::LOCAL, user), seed::stream::LOCAL, epoch as u64)
}

/// Runs `local_step_count` SGD steps from `w_start` on the partition.
///
/// The partition is reshuffled every epoch and cut into consecutive batches;
/// the last batch of an epoch may be short and is still used.
pub fn train_local<T, M>(
    model: &M,
    w_start: &Params<T>,
    partition: &ClientPartition<T>,
    cfg: &LocalTrainingConfig,
    round_seed: u64,
) -> Result<ClientUpdate<T>>
where
    T: Scalar,
    M: Classifier<T>,
{
    if w_start.len() != model.param_count() {
        return Err(usage_err(format!(
            "start weights have length {}, model expects {}",
            w_start.len(),
            model.param_count()
        )));
    }
    if partition.is_empty() {
        return Err(usage_err(format!("user {} has an empty partition", partition.user_id)));
    }
    let n = partition.len();
    let b = cfg.batch_size.resolve(n);
    let eta = T::of(cfg.eta_local);

    let mut w = w_start.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let mut loss_sum = T::zero();
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut seed::rng(epoch_seed(round_seed, partition.user_id, epoch)));
        for chunk in order.chunks(b) {
            let batch: Vec<_> = chunk.iter().map(|&i| &partition.examples[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&w, &batch)?;
            w.axpy(-eta, &grad);
            loss_sum += loss;
            steps += 1;
        }
    }
    if !w.is_finite() {
        return Err(usage_err(format!("local training diverged for user {} (non-finite weights)", partition.user_id)));
    }
    Ok(ClientUpdate {
        user_id: partition.user_id,
        weights: w,
        example_count: n,
        train_loss: loss_sum / T::of_usize(steps),
        local_steps: steps,
    })
}
