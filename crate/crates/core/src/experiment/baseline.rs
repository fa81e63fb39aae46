use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::config::{BaselineMode, ExperimentConfig, Setup};
use crate::error::{config_err, Result};
use crate::eval::{early_stop_check, federated_eval};
use crate::model::Classifier;
use crate::seed;
use crate::server::AveragingStrategy;
use crate::{LabeledExample, ServerState};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRecord {
    pub step: u64,
    pub dev_metric: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineReport {
    pub mode: BaselineMode,
    pub steps_to_target: Option<u64>,
    pub steps_run: u64,
    pub pooled_examples: usize,
    pub dev_metric: f64,
    pub test_metric: Option<f64>,
    pub config_echo: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub report: BaselineReport,
    pub curve: Vec<BaselineRecord>,
}

pub fn run_baseline(config: &ExperimentConfig) -> Result<BaselineOutcome> {
    let setup = Setup::prepare(config)?;
    run_baseline_prepared(config, &setup)
}

/// Centralized mini-batch training on the pooled examples of all train users,
/// with Adam or plain SGD, evaluated on dev users every `eval_every` steps.
pub fn run_baseline_prepared(config: &ExperimentConfig, setup: &Setup) -> Result<BaselineOutcome> {
    let bl = &config.baseline;
    let strategy = match bl.mode {
        BaselineMode::None => return Err(config_err("baseline mode is none")),
        BaselineMode::CentralAdam => AveragingStrategy::adam(bl.learning_rate),
        BaselineMode::CentralSgd => AveragingStrategy::plain(bl.learning_rate),
    };
    let pooled: Vec<&LabeledExample> = setup
        .split
        .train
        .iter()
        .map(|&id| setup.federation.require(id))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flat_map(|p| &p.examples)
        .collect();
    let batch = bl.batch_size.resolve(pooled.len());

    let mut state = ServerState::new(setup.init.clone());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut curve = Vec::new();
    let mut steps_to_target = None;
    let mut last_dev = f64::NAN;

    for step in 1..=bl.max_steps {
        if cursor >= order.len() {
            order = (0..pooled.len()).collect();
            order.shuffle(&mut seed::rng(seed::derive(config.master_seed, seed::stream::BASELINE, epoch)));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + batch).min(order.len());
        let examples: Vec<&LabeledExample> = order[cursor..end].iter().map(|&i| pooled[i]).collect();
        cursor = end;

        let (loss, grad) = setup.model.loss_and_gradient(&state.weights, &examples)?;
        state.apply(&grad, &strategy)?;

        if step % config.eval_every != 0 && step != bl.max_steps {
            continue;
        }
        let dev = federated_eval(
            &setup.model,
            &state.weights,
            &setup.federation,
            &setup.split.dev,
            &config.targets,
            config.eval_mode,
        )?;
        last_dev = dev.value;
        curve.push(BaselineRecord { step, dev_metric: dev.value, train_loss: loss });
        if early_stop_check(dev.value, &config.targets) {
            steps_to_target = Some(step);
            if config.stop_at_target {
                break;
            }
        }
    }

    let test_metric = if setup.split.test.is_empty() {
        None
    } else {
        Some(
            federated_eval(
                &setup.model,
                &state.weights,
                &setup.federation,
                &setup.split.test,
                &config.targets,
                config.eval_mode,
            )?
            .value,
        )
    };
    Ok(BaselineOutcome {
        report: BaselineReport {
            mode: bl.mode,
            steps_to_target,
            steps_run: state.round,
            pooled_examples: pooled.len(),
            dev_metric: last_dev,
            test_metric,
            config_echo: config.clone(),
        },
        curve,
    })
}

/// Writes `baseline.csv` and `baseline_report.json` into `dir`.
pub fn write_baseline_outputs(outcome: &BaselineOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("baseline.csv"))?;
    w.write_record(["step", "dev_metric", "train_loss"])?;
    for r in &outcome.curve {
        w.write_record([r.step.to_string(), r.dev_metric.to_string(), r.train_loss.to_string()])?;
    }
    w.flush()?;
    let mut report = serde_json::to_string_pretty(&outcome.report)?;
    report.push('\n');
    std::fs::write(dir.join("baseline_report.json"), report)?;
    Ok(())
}
