//! Experiment harness: configs, dataset directories, splits, the
//! generate-fit-evaluate pipeline and its artifacts.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plot;
pub mod split;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use config::{
    DomainConfig, ExperimentConfig, GameExperiment, MazeExperiment, RsaExperiment, CONFIG_VERSION, MAZE_LEARNING_RATES,
};
pub use dataset::{Dataset, DatasetBody, DatasetMeta};
pub use experiment::{
    evaluate_model, fit_model, run_experiment, sweep_model, ExperimentOutcome, ExperimentReport, ModelKind,
    ModelReport, ModelRun, RecoveryRow,
};
pub use split::{stratified_split, Split, SplitFractions};

use crate::error::Result;
use crate::exec::Execution;
use crate::fit::{evaluate_metrics, Metrics, ModelParams, PolicyFamily};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Maze,
    Rsa,
    Game,
}

/// Share of records whose action is the argmax of the marginal policy.
pub fn exact_match_accuracy<F: PolicyFamily>(family: &F, params: &ModelParams, exec: Execution) -> Result<f64> {
    Ok(evaluate_metrics(family, params, exec)?.accuracy)
}

pub fn mean_nll<F: PolicyFamily>(family: &F, params: &ModelParams, exec: Execution) -> Result<f64> {
    Ok(evaluate_metrics(family, params, exec)?.mean_nll)
}

/// One line of `metrics.csv`; an empty subpop is the whole split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub split: String,
    pub subpop: Option<usize>,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub records: u64,
}

impl MetricsRow {
    pub fn from_metrics(model: &str, split: &str, m: &Metrics) -> Vec<MetricsRow> {
        let row = |subpop, accuracy, mean_nll, records| MetricsRow {
            model: model.to_string(),
            split: split.to_string(),
            subpop,
            accuracy,
            mean_nll,
            records,
        };
        std::iter::once(row(None, m.accuracy, m.mean_nll, m.records))
            .chain(m.per_subpop.iter().map(|s| row(Some(s.subpop), s.accuracy, s.mean_nll, s.records)))
            .collect()
    }
}

pub fn write_metrics_csv(out: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(experiment::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
