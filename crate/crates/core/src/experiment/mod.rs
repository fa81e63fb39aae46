//! End-to-end runs: the federated round loop with early stopping, the
//! centralized baselines, and parameter sweeps, plus their CSV/JSON outputs.

mod baseline;
mod config;
mod run;
mod sweep;

pub use baseline::{
    run_baseline, run_baseline_prepared, write_baseline_outputs, BaselineOutcome, BaselineRecord, BaselineReport,
};
pub use config::{BaselineConfig, BaselineMode, ExperimentConfig, FederationSource, Setup, SplitConfig};
pub use run::{
    run_experiment, run_prepared, write_experiment_outputs, write_metrics_csv, ExperimentOutcome, ExperimentReport,
    MetricsRecord,
};
pub use sweep::{expand, sweep, write_sweep_csv, write_sweep_outputs, SweepGrid, SweepOutcome, SweepPoint};
