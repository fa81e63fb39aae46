use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_federation, split_users, synthesize_federation, FederationSpec, UserSplit};
use crate::error::{config_err, Result};
use crate::eval::{EvalMode, EvalTargets};
use crate::local::{BatchSize, LocalTrainingConfig};
use crate::model::ModelSpec;
use crate::seed;
use crate::server::{AveragingStrategy, RoundConfig};
use crate::{Federation, ParameterVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum FederationSource {
    Synthesize { spec: FederationSpec, seed: u64 },
    Load { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub dev_frac: f64,
}

impl Default for SplitConfig {
    /// 1,374 / 200 / 200 users out of 1,774.
    fn default() -> Self {
        Self { train_frac: 1374.0 / 1774.0, dev_frac: 200.0 / 1774.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    None,
    CentralAdam,
    CentralSgd,
}

/// Centralized training on the pooled train users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default)]
    pub mode: BaselineMode,
    #[serde(default = "default_baseline_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_baseline_batch")]
    pub batch_size: BatchSize,
    #[serde(default = "default_baseline_steps")]
    pub max_steps: u64,
}

fn default_baseline_lr() -> f64 {
    0.001
}

fn default_baseline_batch() -> BatchSize {
    BatchSize::Fixed(32)
}

fn default_baseline_steps() -> u64 {
    1000
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            mode: BaselineMode::None,
            learning_rate: default_baseline_lr(),
            batch_size: default_baseline_batch(),
            max_steps: default_baseline_steps(),
        }
    }
}

fn one() -> u64 {
    1
}

fn one_worker() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// A full experiment. Parsed from a single JSON document; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub federation: FederationSource,
    #[serde(default)]
    pub split: SplitConfig,
    pub model: ModelSpec,
    pub local: LocalTrainingConfig,
    pub strategy: AveragingStrategy,
    /// Participation ratio C.
    pub participation: f64,
    pub max_rounds: u64,
    #[serde(default)]
    pub targets: EvalTargets,
    pub master_seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "one")]
    pub eval_every: u64,
    #[serde(default)]
    pub eval_mode: EvalMode,
    /// Stop at the first evaluation meeting the recall target.
    #[serde(default = "yes")]
    pub stop_at_target: bool,
    /// Client-training threads per round; 0 uses every core.
    #[serde(default = "one_worker")]
    pub workers: usize,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig { participation: self.participation, local: self.local.clone(), strategy: self.strategy.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(config_err("max_rounds must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every must be at least 1"));
        }
        if let FederationSource::Synthesize { spec, .. } = &self.federation {
            spec.validate()?;
            if spec.feature_dim != self.model.input_dim() || spec.class_count != self.model.class_count() {
                return Err(config_err(format!(
                    "model dims {:?} do not match federation feature_dim {} / class_count {}",
                    self.model.layer_dims(),
                    spec.feature_dim,
                    spec.class_count
                )));
            }
        }
        let split = &self.split;
        if !(split.train_frac > 0.0 && split.train_frac <= 1.0)
            || !(split.dev_frac > 0.0 && split.train_frac + split.dev_frac <= 1.0 + 1e-12)
        {
            return Err(config_err("split needs train_frac in (0, 1], dev_frac > 0 and a sum of at most 1"));
        }
        self.round_config().validate()?;
        self.targets.validate()?;
        if self.baseline.mode != BaselineMode::None {
            if !(self.baseline.learning_rate >= 0.0 && self.baseline.learning_rate.is_finite()) {
                return Err(config_err("baseline learning_rate must be finite and nonnegative"));
            }
            if self.baseline.max_steps == 0 {
                return Err(config_err("baseline max_steps must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Federation, user split and initial weights of a run.
#[derive(Clone, Debug)]
pub struct Setup {
    pub federation: Federation,
    pub split: UserSplit,
    pub model: ModelSpec,
    pub init: ParameterVector,
}

impl Setup {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let federation: Federation = match &config.federation {
            FederationSource::Synthesize { spec, seed } => synthesize_federation(spec, *seed)?,
            FederationSource::Load { path } => load_federation(path)?,
        };
        Self::with_federation(config, federation)
    }

    /// Reuses an already built federation; the split and initial weights
    /// still come from `config.master_seed`.
    pub fn with_federation(config: &ExperimentConfig, federation: Federation) -> Result<Self> {
        config.validate()?;
        let model = config.model.clone();
        if federation.feature_dim() != model.input_dim() || federation.class_count() != model.class_count() {
            return Err(config_err(format!(
                "model dims {:?} do not match federation feature_dim {} / class_count {}",
                model.layer_dims(),
                federation.feature_dim(),
                federation.class_count()
            )));
        }
        let split = split_users(
            &federation,
            config.split.train_frac,
            config.split.dev_frac,
            seed::derive(config.master_seed, seed::stream::SPLIT, 0),
        )?;
        if split.train.is_empty() || split.dev.is_empty() {
            return Err(config_err(format!(
                "split leaves {} train and {} dev users; both pools must be nonempty",
                split.train.len(),
                split.dev.len()
            )));
        }
        let init = model.xavier_init(seed::derive(config.master_seed, seed::stream::INIT, 0));
        Ok(Self { federation, split, model, init })
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| config_err(format!("cannot start worker pool: {e}")))
}
