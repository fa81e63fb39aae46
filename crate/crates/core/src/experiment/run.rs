use std::path::Path;
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::config::{thread_pool, ExperimentConfig, Setup};
use crate::error::Result;
use crate::eval::{early_stop_check, federated_eval};
use crate::seed;
use crate::server::{bytes_to_mb, run_round, upload_cost_bytes};
use crate::ServerState;

/// Dev-set metrics after an evaluated round.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub round: u64,
    pub dev_metric: f64,
    pub train_loss_mean: f64,
    /// Upload per average client so far, in decimal MB.
    pub cumulative_upload_mb: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub rounds_to_target: Option<u64>,
    pub rounds_run: u64,
    pub dev_metric: f64,
    pub test_metric: Option<f64>,
    pub upload_mb_per_client: f64,
    pub total_local_steps: u64,
    pub total_uploads: u64,
    pub config_echo: ExperimentConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub metrics: Vec<MetricsRecord>,
    pub final_state: ServerState,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let setup = Setup::prepare(config)?;
    run_prepared(config, &setup)
}

/// Runs rounds `1..=max_rounds`, evaluating on dev users every `eval_every`
/// rounds and after the last one. With `stop_at_target` the loop ends at the
/// first evaluation meeting the recall target. Test users are evaluated once
/// at the end.
pub fn run_prepared(config: &ExperimentConfig, setup: &Setup) -> Result<ExperimentOutcome> {
    config.validate()?;
    let pool = thread_pool(config.workers)?;
    pool.install(|| run_loop(config, setup))
}

fn run_loop(config: &ExperimentConfig, setup: &Setup) -> Result<ExperimentOutcome> {
    let round_cfg = config.round_config();
    let d = setup.model.param_count() as u64;
    let started = Instant::now();

    let mut state = ServerState::new(setup.init.clone());
    let mut metrics = Vec::new();
    let mut rounds_to_target = None;
    let mut total_local_steps = 0u64;
    let mut last_dev = f64::NAN;

    for t in 1..=config.max_rounds {
        let record = run_round(
            &mut state,
            &setup.model,
            &setup.federation,
            &setup.split.train,
            &round_cfg,
            seed::round_seed(config.master_seed, t),
        )?;
        total_local_steps += record.local_steps as u64;

        if t % config.eval_every != 0 && t != config.max_rounds {
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
        metrics.push(MetricsRecord {
            round: t,
            dev_metric: dev.value,
            train_loss_mean: record.train_loss_mean,
            cumulative_upload_mb: bytes_to_mb(upload_cost_bytes(d, config.participation, t)),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if rounds_to_target.is_none() && early_stop_check(dev.value, &config.targets) {
            rounds_to_target = Some(t);
            info!("recall target {} reached at round {t}", config.targets.recall_target);
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
    let rounds_run = state.round;
    let report = ExperimentReport {
        rounds_to_target,
        rounds_run,
        dev_metric: last_dev,
        test_metric,
        upload_mb_per_client: bytes_to_mb(upload_cost_bytes(d, config.participation, rounds_run)),
        total_local_steps,
        total_uploads: state.cumulative_uploads,
        config_echo: config.clone(),
    };
    Ok(ExperimentOutcome { report, metrics, final_state: state })
}

/// `round,dev_metric,train_loss_mean,cumulative_upload_mb`, one row per
/// evaluated round. Wall-clock times are kept out so the file is reproducible.
pub fn write_metrics_csv<W: std::io::Write>(metrics: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "dev_metric", "train_loss_mean", "cumulative_upload_mb"])?;
    for m in metrics {
        w.write_record([
            m.round.to_string(),
            m.dev_metric.to_string(),
            m.train_loss_mean.to_string(),
            m.cumulative_upload_mb.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_timings_csv<W: std::io::Write>(metrics: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "wall_seconds"])?;
    for m in metrics {
        w.write_record([m.round.to_string(), format!("{:.6}", m.wall_seconds)])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `timings.csv` and `report.json` into `dir`.
pub fn write_experiment_outputs(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(&outcome.metrics, std::fs::File::create(dir.join("metrics.csv"))?)?;
    write_timings_csv(&outcome.metrics, std::fs::File::create(dir.join("timings.csv"))?)?;
    let mut report = serde_json::to_string_pretty(&outcome.report)?;
    report.push('\n');
    std::fs::write(dir.join("report.json"), report)?;
    Ok(())
}
