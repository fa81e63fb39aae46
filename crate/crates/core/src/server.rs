//! Parameter server: client selection, pseudo-gradient averaging, the plain
//! and Adam update rules, round orchestration and upload accounting.
//!
//! A round broadcasts `w_{t-1}` to the selected users, collects their locally
//! trained weights `w_{t,k}` and forms the pseudo-gradient
//!
//! ```text
//! G_t = sum_k (n_k / n_r) (w_{t-1} - w_{t,k}),   n_r = sum_k n_k
//! ```
//!
//! which the server then applies either as `w_t = w_{t-1} - eta G_t` or
//! through a bias-corrected Adam step whose moments persist across rounds.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Federation, UserId};
use crate::error::{config_err, usage_err, Result};
use crate::local::{train_local, ClientUpdate, LocalTrainingConfig};
use crate::model::{Classifier, Params};
use crate::scalar::Scalar;
use crate::seed;

/// Bytes per uploaded parameter (float32 on the wire).
pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AveragingKind {
    Plain,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingStrategy {
    pub kind: AveragingKind,
    pub eta_global: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl AveragingStrategy {
    pub fn plain(eta_global: f64) -> Self {
        Self { kind: AveragingKind::Plain, eta_global, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }

    pub fn adam(eta_global: f64) -> Self {
        Self { kind: AveragingKind::Adam, ..Self::plain(eta_global) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_global > 0.0 && self.eta_global.is_finite()) {
            return Err(config_err("eta_global must be positive"));
        }
        if self.kind == AveragingKind::Adam {
            if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
                return Err(config_err("Adam decay rates must lie in [0, 1)"));
            }
            if !(self.epsilon > 0.0) {
                return Err(config_err("Adam epsilon must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState<T> {
    pub weights: Params<T>,
    /// Number of completed rounds.
    pub round: u64,
    pub m: Params<T>,
    pub v: Params<T>,
    pub adam_step: u64,
    /// Client updates received so far.
    pub cumulative_uploads: u64,
    pub cumulative_upload_bytes: u64,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(weights: Params<T>) -> Self {
        let d = weights.len();
        Self {
            weights,
            round: 0,
            m: Params::zeros(d),
            v: Params::zeros(d),
            adam_step: 0,
            cumulative_uploads: 0,
            cumulative_upload_bytes: 0,
        }
    }

    fn check_dim(&self, g: &Params<T>) -> Result<()> {
        if g.len() != self.weights.len() {
            return Err(usage_err(format!(
                "pseudo-gradient has length {}, server weights {}",
                g.len(),
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// `w_t = w_{t-1} - eta_global G_t`. Moments are left alone.
    pub fn apply_plain(&mut self, g: &Params<T>, eta_global: f64) -> Result<()> {
        self.check_dim(g)?;
        self.weights.axpy(-T::of(eta_global), g);
        self.round += 1;
        Ok(())
    }

    /// Bias-corrected Adam step on the pseudo-gradient.
    pub fn apply_adam(&mut self, g: &Params<T>, strategy: &AveragingStrategy) -> Result<()> {
        self.check_dim(g)?;
        let b1 = T::of(strategy.beta1);
        let b2 = T::of(strategy.beta2);
        let eps = T::of(strategy.epsilon);
        let eta = T::of(strategy.eta_global);
        let step = self.adam_step + 1;
        let c1 = T::one() - b1.powi(step as i32);
        let c2 = T::one() - b2.powi(step as i32);
        for j in 0..g.len() {
            let gj = g[j];
            self.m[j] = b1 * self.m[j] + (T::one() - b1) * gj;
            self.v[j] = b2 * self.v[j] + (T::one() - b2) * gj * gj;
            let m_hat = self.m[j] / c1;
            let v_hat = self.v[j] / c2;
            self.weights[j] -= eta * m_hat / (v_hat.sqrt() + eps);
        }
        self.adam_step = step;
        self.round += 1;
        Ok(())
    }

    pub fn apply(&mut self, g: &Params<T>, strategy: &AveragingStrategy) -> Result<()> {
        match strategy.kind {
            AveragingKind::Plain => self.apply_plain(g, strategy.eta_global),
            AveragingKind::Adam => self.apply_adam(g, strategy),
        }
    }
}

/// Number of users drawn per round: `max(1, round(C K))`.
pub fn selection_count(user_count: usize, participation: f64) -> usize {
    ((participation * user_count as f64).round() as usize).clamp(1, user_count.max(1))
}

/// Uniform sample without replacement, returned in ascending id order.
pub fn select_clients(user_ids: &[UserId], participation: f64, round_seed: u64) -> Result<Vec<UserId>> {
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(config_err(format!("participation ratio {participation} must lie in (0, 1]")));
    }
    if user_ids.is_empty() {
        return Err(usage_err("no users to select from"));
    }
    let count = selection_count(user_ids.len(), participation);
    let mut rng = seed::rng(seed::derive(round_seed, seed::stream::SELECT, 0));
    let mut picked: Vec<UserId> =
        index::sample(&mut rng, user_ids.len(), count).into_iter().map(|i| user_ids[i]).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// `G_t = sum_k (n_k / n_r) (w_prev - w_k)`, summed in ascending user id order
/// so the result does not depend on the order of `updates`.
pub fn pseudo_gradient<T: Scalar>(w_prev: &Params<T>, updates: &[ClientUpdate<T>]) -> Result<Params<T>> {
    if updates.is_empty() {
        return Err(usage_err("no client updates to aggregate"));
    }
    let mut ordered: Vec<&ClientUpdate<T>> = updates.iter().collect();
    ordered.sort_by_key(|u| u.user_id);
    for pair in ordered.windows(2) {
        if pair[0].user_id == pair[1].user_id {
            return Err(usage_err(format!("two updates from user {}", pair[0].user_id)));
        }
    }
    for u in &ordered {
        if u.weights.len() != w_prev.len() {
            return Err(usage_err(format!(
                "update from user {} has length {}, expected {}",
                u.user_id,
                u.weights.len(),
                w_prev.len()
            )));
        }
        if u.example_count == 0 {
            return Err(usage_err(format!("update from user {} reports zero examples", u.user_id)));
        }
    }
    let n_r = T::of_usize(ordered.iter().map(|u| u.example_count).sum());
    let mut g = Params::zeros(w_prev.len());
    for u in ordered {
        let coef = T::of_usize(u.example_count) / n_r;
        for ((gj, &prev), &wk) in g.iter_mut().zip(w_prev.iter()).zip(u.weights.iter()) {
            *gj += coef * (prev - wk);
        }
    }
    Ok(g)
}

/// Total upload per client over `rounds` rounds: `d * 4 * C * rounds` bytes,
/// rounded to the nearest byte.
pub fn upload_cost_bytes(param_count: u64, participation: f64, rounds: u64) -> u64 {
    (param_count as f64 * BYTES_PER_PARAM as f64 * participation * rounds as f64).round() as u64
}

/// Decimal megabytes.
pub fn bytes_to_mb(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundConfig {
    pub participation: f64,
    pub local: LocalTrainingConfig,
    pub strategy: AveragingStrategy,
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(config_err(format!("participation ratio {} must lie in (0, 1]", self.participation)));
        }
        self.local.validate()?;
        self.strategy.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub selected_users: Vec<UserId>,
    pub n_r: usize,
    pub pseudo_gradient_norm: f64,
    /// `n_k`-weighted mean of the selected clients' local training losses.
    pub train_loss_mean: f64,
    pub upload_bytes: u64,
    pub local_steps: usize,
}

/// One synchronous round.
///
/// Every selected client starts from the same `w_{t-1}`. Client training runs
/// on the ambient rayon pool; the result is identical for any pool size.
pub fn run_round<T, M>(
    state: &mut ServerState<T>,
    model: &M,
    federation: &Federation<T>,
    train_user_ids: &[UserId],
    cfg: &RoundConfig,
    round_seed: u64,
) -> Result<RoundRecord>
where
    T: Scalar,
    M: Classifier<T>,
{
    if state.weights.len() != model.param_count() {
        return Err(usage_err(format!(
            "server weights have length {}, model expects {}",
            state.weights.len(),
            model.param_count()
        )));
    }
    cfg.validate()?;
    let selected = select_clients(train_user_ids, cfg.participation, round_seed)?;
    let partitions = selected.iter().map(|&id| federation.require(id)).collect::<Result<Vec<_>>>()?;

    let w_prev = &state.weights;
    let updates = partitions
        .par_iter()
        .map(|p| train_local(model, w_prev, p, &cfg.local, round_seed))
        .collect::<Result<Vec<_>>>()?;

    let g = pseudo_gradient(w_prev, &updates)?;
    let n_r: usize = updates.iter().map(|u| u.example_count).sum();
    let train_loss_mean =
        updates.iter().map(|u| u.train_loss.as_f64() * u.example_count as f64).sum::<f64>() / n_r as f64;
    let local_steps = updates.iter().map(|u| u.local_steps).sum();
    let upload_bytes = updates.len() as u64 * model.param_count() as u64 * BYTES_PER_PARAM;

    state.apply(&g, &cfg.strategy)?;
    if !state.weights.is_finite() {
        return Err(usage_err(format!("global weights became non-finite in round {}", state.round)));
    }
    state.cumulative_uploads += updates.len() as u64;
    state.cumulative_upload_bytes += upload_bytes;

    Ok(RoundRecord {
        round: state.round,
        selected_users: selected,
        n_r,
        pseudo_gradient_norm: g.norm().as_f64(),
        train_loss_mean,
        upload_bytes,
        local_steps,
    })
}
