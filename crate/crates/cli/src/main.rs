use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use fedwake::data::{partition_stats, save_federation, synthesize_federation};
use fedwake::experiment::{
    run_baseline, run_experiment, sweep, write_baseline_outputs, write_experiment_outputs, write_sweep_outputs,
    BaselineMode, ExperimentConfig, FederationSource, SweepGrid,
};
use fedwake::Federation;
use log::info;

#[derive(Parser)]
#[command(name = "fedwake", version, about = "Federated averaging simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federated experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the number of client-training threads (0 = all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run every point of a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Train centrally on the pooled train users.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Write the configured synthetic federation as a JSON-lines file.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::from_path(path).with_context(|| format!("reading config {}", path.display()))
}

fn output_dir(flag: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    flag.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { config, seed, output_dir: dir, workers } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.master_seed = seed;
            }
            if let Some(workers) = workers {
                cfg.workers = workers;
            }
            let dir = output_dir(dir, &cfg);
            cfg.output_dir = Some(dir.clone());
            let outcome = run_experiment(&cfg)?;
            write_experiment_outputs(&outcome, &dir)?;
            let r = &outcome.report;
            match r.rounds_to_target {
                Some(t) => println!("target reached at round {t}"),
                None => println!("target not reached in {} rounds", r.rounds_run),
            }
            println!(
                "dev {:.4}  test {}  upload {:.6} MB/client  -> {}",
                r.dev_metric,
                r.test_metric.map_or("n/a".to_string(), |m| format!("{m:.4}")),
                r.upload_mb_per_client,
                dir.display()
            );
        }
        Command::Sweep { config, grid, output_dir: dir } => {
            let cfg = load_config(&config)?;
            let grid = SweepGrid::from_path(&grid).with_context(|| format!("reading grid {}", grid.display()))?;
            let dir = output_dir(dir, &cfg);
            info!("sweeping {} grid points", grid.len());
            let outcome = sweep(&cfg, &grid)?;
            write_sweep_outputs(&outcome, &dir)?;
            for (point, result) in &outcome.points {
                let params: Vec<String> = point.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "point {:3}  {}  rounds_to_target={}",
                    point.index,
                    params.join(" "),
                    result.report.rounds_to_target.map_or("-".to_string(), |t| t.to_string())
                );
            }
        }
        Command::Baseline { config, output_dir: dir } => {
            let cfg = load_config(&config)?;
            if cfg.baseline.mode == BaselineMode::None {
                bail!("config has baseline.mode = none; set central_adam or central_sgd");
            }
            let dir = output_dir(dir, &cfg);
            let outcome = run_baseline(&cfg)?;
            write_baseline_outputs(&outcome, &dir)?;
            let r = &outcome.report;
            match r.steps_to_target {
                Some(s) => println!("target reached at step {s} ({} pooled examples)", r.pooled_examples),
                None => println!("target not reached in {} steps", r.steps_run),
            }
        }
        Command::Synthesize { config, out } => {
            let cfg = load_config(&config)?;
            let FederationSource::Synthesize { spec, seed } = &cfg.federation else {
                bail!("config federation source is not synthetic");
            };
            let fed: Federation = synthesize_federation(spec, *seed)?;
            save_federation(&fed, &out)?;
            let s = partition_stats(&fed);
            println!(
                "{} users, {} examples, size {:.1} +/- {:.1}, {:.1}% positive -> {}",
                s.user_count,
                s.total_examples,
                s.size_mean,
                s.size_std,
                100.0 * s.positive_rate,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
