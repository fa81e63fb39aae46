//! Cartesian parameter sweeps over an experiment config.
//!
//! A grid is a JSON object mapping config paths to lists of values, e.g.
//!
//! ```json
//! {"participation": [0.05, 0.1, 0.5],
//!  "strategy": [{"kind": "plain", "eta_global": 1.0},
//!               {"kind": "adam", "eta_global": 0.001}]}
//! ```
//!
//! Nested fields use dotted paths (`"local.batch_size"`). Each grid point gets
//! its own master seed derived from the base seed and the point index, unless
//! the grid lists `master_seed` itself.

use std::path::Path;

use serde_json::{Map, Value};

use super::config::{ExperimentConfig, Setup};
use super::run::{run_prepared, write_experiment_outputs, ExperimentOutcome};
use crate::error::{config_err, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    axes: Vec<(String, Vec<Value>)>,
}

impl SweepGrid {
    pub fn new(axes: Vec<(String, Vec<Value>)>) -> Result<Self> {
        if axes.is_empty() {
            return Err(config_err("sweep grid has no parameters"));
        }
        for (name, values) in &axes {
            if values.is_empty() {
                return Err(config_err(format!("grid parameter {name:?} has no values")));
            }
        }
        Ok(Self { axes })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: Map<String, Value> = serde_json::from_str(text)?;
        let axes = map
            .into_iter()
            .map(|(k, v)| match v {
                Value::Array(values) => Ok((k, values)),
                _ => Err(config_err(format!("grid parameter {k:?} must map to a list"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.axes.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|(_, v)| v.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid points in row-major order (last axis varies fastest).
    pub fn points(&self) -> Vec<Vec<Value>> {
        let mut points = vec![Vec::new()];
        for (_, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(v.clone());
                        p
                    })
                })
                .collect();
        }
        points
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("grid path {path:?} does not name a config field")))?;
        if keys.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(key).ok_or_else(|| config_err(format!("grid path {path:?}: no field {key:?}")))?;
    }
    Err(config_err("empty grid path"))
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    pub params: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

/// Expands the grid into validated configs. Any invalid point fails the whole
/// sweep before anything runs.
pub fn expand(base: &ExperimentConfig, grid: &SweepGrid) -> Result<Vec<SweepPoint>> {
    let base_value = serde_json::to_value(base)?;
    let names: Vec<String> = grid.names().map(str::to_string).collect();
    let sets_seed = names.iter().any(|n| n == "master_seed");
    grid.points()
        .into_iter()
        .enumerate()
        .map(|(index, values)| {
            let mut v = base_value.clone();
            if !sets_seed {
                let derived = seed::derive(base.master_seed, seed::stream::SWEEP, index as u64);
                set_path(&mut v, "master_seed", Value::from(derived))?;
            }
            for (name, value) in names.iter().zip(&values) {
                set_path(&mut v, name, value.clone())?;
            }
            let config: ExperimentConfig =
                serde_json::from_value(v).map_err(|e| config_err(format!("grid point {index}: {e}")))?;
            config.validate().map_err(|e| config_err(format!("grid point {index}: {e}")))?;
            Ok(SweepPoint { index, params: names.iter().cloned().zip(values).collect(), config })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub points: Vec<(SweepPoint, ExperimentOutcome)>,
}

pub fn sweep(base: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepOutcome> {
    let points = expand(base, grid)?;
    let mut results = Vec::with_capacity(points.len());
    for point in points {
        let setup = Setup::prepare(&point.config)?;
        let outcome = run_prepared(&point.config, &setup)?;
        results.push((point, outcome));
    }
    Ok(SweepOutcome { points: results })
}

/// One row per (grid point, evaluated round). Parameter cells hold the
/// compact JSON of the grid value.
pub fn write_sweep_csv<W: std::io::Write>(outcome: &SweepOutcome, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["point".to_string()];
    if let Some((first, _)) = outcome.points.first() {
        header.extend(first.params.iter().map(|(k, _)| k.clone()));
    }
    header.extend(["round", "dev_metric", "train_loss_mean", "cumulative_upload_mb"].map(String::from));
    w.write_record(&header)?;
    for (point, result) in &outcome.points {
        for m in &result.metrics {
            let mut row = vec![point.index.to_string()];
            row.extend(point.params.iter().map(|(_, v)| v.to_string()));
            row.extend([
                m.round.to_string(),
                m.dev_metric.to_string(),
                m.train_loss_mean.to_string(),
                m.cumulative_upload_mb.to_string(),
            ]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `sweep.csv` plus a `point_<i>/` directory of per-run outputs.
pub fn write_sweep_outputs(outcome: &SweepOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_sweep_csv(outcome, std::fs::File::create(dir.join("sweep.csv"))?)?;
    for (point, result) in &outcome.points {
        write_experiment_outputs(result, &dir.join(format!("point_{:03}", point.index)))?;
    }
    Ok(())
}
