use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DomainConfig, ExperimentConfig};
use super::dataset::{Dataset, DatasetBody};
use super::plot::{posterior_chart, PosteriorRow};
use super::split::{stratified_split, Split};
use super::{write_metrics_csv, Domain, MetricsRow};
use crate::anytime::{prior_from_weights, BudgetPrior};
use crate::error::{Error, Result};
use crate::exec::map_slice;
use crate::fit::{
    evaluate_metrics, fit, fit_boltzmann, fixed_budget_baseline, marginal_nll, mcts_puct_family, mcts_runtime_family,
    sweep, BudgetKind, FitConfig, FitResult, MazeBoltzmannFamily, MazeRuntimeFamily, Metrics, ModelParams,
    PolicyFamily, RsaFamily, RsaGrid, RsaThetaMode,
};
use crate::maze::softplus;

/// A model variant of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Latent runtime budget.
    Libm,
    /// Latent temperature (maze, RSA) or exploration coefficient (game).
    Baseline,
    /// Runtime frozen at one grid value for every subpopulation.
    Fixed(u32),
}

impl ModelKind {
    pub fn name(self, domain: Domain) -> String {
        match self {
            ModelKind::Libm => "libm".into(),
            ModelKind::Baseline if domain == Domain::Game => "puct".into(),
            ModelKind::Baseline => "boltzmann".into(),
            ModelKind::Fixed(b) => format!("fixed_{b}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "libm" => Ok(ModelKind::Libm),
            "boltzmann" | "puct" | "baseline" => Ok(ModelKind::Baseline),
            _ => s.strip_prefix("fixed_").and_then(|b| b.parse().ok()).map(ModelKind::Fixed).ok_or_else(|| {
                Error::Config(format!("unknown model {s:?}; expected libm, boltzmann, puct or fixed_<budget>"))
            }),
        }
    }
}

pub struct SplitFamilies<F> {
    pub train: F,
    pub valid: F,
    pub test: F,
}

/// Work that is generic over the family a model kind resolves to.
pub trait FamilyVisitor {
    type Output;
    fn visit<F: PolicyFamily>(self, families: &SplitFamilies<F>, params0: ModelParams) -> Result<Self::Output>;
}

fn three<F>(mut build: impl FnMut(&[usize]) -> Result<F>, split: &Split) -> Result<SplitFamilies<F>> {
    Ok(SplitFamilies { train: build(&split.train)?, valid: build(&split.valid)?, test: build(&split.test)? })
}

/// Build the train/valid/test families of one model kind and a starting
/// point (zero θ, uniform priors; point masses for fixed budgets).
pub fn with_families<V: FamilyVisitor>(
    config: &ExperimentConfig,
    data: &Dataset,
    split: &Split,
    kind: ModelKind,
    visitor: V,
) -> Result<V::Output> {
    if config.domain.domain() != data.meta.domain {
        return Err(Error::Config(format!(
            "config is for {:?} but the dataset is {:?}",
            config.domain.domain(),
            data.meta.domain
        )));
    }
    let exec = config.fit.execution;
    let grid = config.domain.grid();
    let runtime: Vec<f64> = grid.values().iter().map(|&v| v as f64).collect();
    let subpops = config.domain.subpopulations().len();
    let start = |theta: usize, budget_kind: BudgetKind, values: Vec<f64>| -> Result<ModelParams> {
        let mut p = ModelParams::new(vec![0.0; theta], subpops, budget_kind, values);
        if let ModelKind::Fixed(b) = kind {
            let k = grid.position(b).ok_or_else(|| Error::Config(format!("fixed budget {b} is not on the grid")))?;
            for prior in &mut p.eta {
                *prior = BudgetPrior::point_mass(grid.len(), k, prior.subpopulation);
            }
        }
        Ok(p)
    };
    match (&config.domain, &data.body) {
        (DomainConfig::Maze(m), DatasetBody::Maze { mazes, trajectories }) => {
            let exits = mazes.first().map_or(m.data.num_exits, |z| z.num_exits());
            if kind == ModelKind::Baseline {
                let fams = three(
                    |idx| {
                        MazeBoltzmannFamily::with_reach(mazes, &Split::pick(trajectories, idx), &m.temps, m.reach, exec)
                    },
                    split,
                )?;
                visitor.visit(&fams, start(exits, BudgetKind::Temp, m.temps.clone())?)
            } else {
                let fams =
                    three(|idx| MazeRuntimeFamily::new(mazes, &Split::pick(trajectories, idx), grid, exec), split)?;
                visitor.visit(&fams, start(exits, BudgetKind::Runtime, runtime)?)
            }
        }
        (DomainConfig::Rsa(r), DatasetBody::Rsa { records }) => {
            let mode = if r.learn_lexicon {
                RsaThetaMode::Joint {
                    vocab_utterances: r.data.vocab_utterances,
                    vocab_referents: r.data.vocab_referents,
                }
            } else {
                RsaThetaMode::Frozen
            };
            let (rsa_grid, budget_kind, values) = if kind == ModelKind::Baseline {
                (RsaGrid::Temps(r.temps.clone()), BudgetKind::Temp, r.temps.clone())
            } else {
                (RsaGrid::Levels(grid.clone()), BudgetKind::Runtime, runtime)
            };
            let fams = three(|idx| RsaFamily::new(&Split::pick(records, idx), r.side, rsa_grid.clone(), mode), split)?;
            let theta = fams.train.num_theta();
            visitor.visit(&fams, start(theta, budget_kind, values)?)
        }
        (DomainConfig::Game(g), DatasetBody::Game { records }) => {
            if kind == ModelKind::Baseline {
                let fams = three(
                    |idx| {
                        mcts_puct_family(&Split::pick(records, idx), &g.data.params, &g.puct_betas, g.puct_budget, exec)
                    },
                    split,
                )?;
                visitor.visit(&fams, start(0, BudgetKind::Puct, g.puct_betas.clone())?)
            } else {
                let fams =
                    three(|idx| mcts_runtime_family(&Split::pick(records, idx), &g.data.params, grid, exec), split)?;
                visitor.visit(&fams, start(0, BudgetKind::Runtime, runtime)?)
            }
        }
        _ => Err(Error::Config("dataset body does not match its domain".into())),
    }
}

/// A fitted model with its held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRun {
    pub fit: FitResult,
    pub valid: Metrics,
    pub test: Metrics,
    /// `(learning rate, validation NLL)` per swept rate; empty without a sweep.
    pub sweep: Vec<(f64, Option<f64>)>,
}

/// Fit on train (sweeping when the config lists rates), then evaluate.
pub struct FitModel<'a> {
    pub config: &'a FitConfig,
    pub kind: ModelKind,
}

impl FamilyVisitor for FitModel<'_> {
    type Output = ModelRun;

    fn visit<F: PolicyFamily>(self, fams: &SplitFamilies<F>, p0: ModelParams) -> Result<ModelRun> {
        let exec = self.config.execution;
        let config = FitConfig {
            freeze_eta: self.config.freeze_eta || matches!(self.kind, ModelKind::Fixed(_)),
            ..self.config.clone()
        };
        let (fit_result, log) = if config.learning_rates.is_empty() {
            let mut r = match self.kind {
                ModelKind::Libm => fit(&fams.train, &config, &p0)?,
                ModelKind::Baseline => fit_boltzmann(&fams.train, &config, &p0)?,
                ModelKind::Fixed(b) => {
                    let k = p0.grid.iter().position(|&g| g == b as f64).unwrap_or(0);
                    fixed_budget_baseline(&fams.train, &config, &p0, k)?
                }
            };
            r.valid_nll = Some(marginal_nll(&fams.valid, &r.params, exec)?);
            (r, Vec::new())
        } else {
            sweep(&fams.train, &fams.valid, &config, &p0)?
        };
        let valid = evaluate_metrics(&fams.valid, &fit_result.params, exec)?;
        let test = evaluate_metrics(&fams.test, &fit_result.params, exec)?;
        Ok(ModelRun { fit: fit_result, valid, test, sweep: log })
    }
}

/// Validation and test metrics of given parameters.
pub struct EvaluateModel<'a> {
    pub params: &'a ModelParams,
    pub config: &'a FitConfig,
}

impl FamilyVisitor for EvaluateModel<'_> {
    type Output = (Metrics, Metrics);

    fn visit<F: PolicyFamily>(self, fams: &SplitFamilies<F>, p0: ModelParams) -> Result<(Metrics, Metrics)> {
        if p0.budget_kind != self.params.budget_kind
            || p0.grid != self.params.grid
            || p0.theta.len() != self.params.theta.len()
        {
            return Err(Error::Config("fitted parameters do not match the model's grid or θ size".into()));
        }
        let exec = self.config.execution;
        Ok((evaluate_metrics(&fams.valid, self.params, exec)?, evaluate_metrics(&fams.test, self.params, exec)?))
    }
}

pub fn split_dataset(config: &ExperimentConfig, data: &Dataset) -> Result<Split> {
    stratified_split(&data.strata(), config.split, config.seed)
}

/// Fit one model kind on a dataset.
pub fn fit_model(config: &ExperimentConfig, data: &Dataset, kind: ModelKind) -> Result<ModelRun> {
    let split = split_dataset(config, data)?;
    with_families(config, data, &split, kind, FitModel { config: &config.fit, kind })
}

/// Learning-rate sweep of one model kind, selected by validation NLL.
pub fn sweep_model(config: &ExperimentConfig, data: &Dataset, kind: ModelKind, rates: &[f64]) -> Result<ModelRun> {
    let fit_config = FitConfig { learning_rates: rates.to_vec(), ..config.fit.clone() };
    let split = split_dataset(config, data)?;
    with_families(config, data, &split, kind, FitModel { config: &fit_config, kind })
}

pub fn evaluate_model(
    config: &ExperimentConfig,
    data: &Dataset,
    kind: ModelKind,
    params: &ModelParams,
) -> Result<(Metrics, Metrics)> {
    let split = split_dataset(config, data)?;
    with_families(config, data, &split, kind, EvaluateModel { params, config: &config.fit })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub budget_kind: BudgetKind,
    pub train_nll: f64,
    pub valid_nll: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub learning_rate: f64,
    pub valid: Metrics,
    pub test: Metrics,
    /// Fitted prior mean of the latent grid value, per subpopulation.
    pub mean_budgets: Vec<f64>,
    /// Effective exit rewards (maze only).
    pub rewards: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub subpop: usize,
    pub budget: f64,
    pub truth: f64,
    pub fitted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub learning_rate: f64,
    pub valid_nll: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub domain: Domain,
    pub seed: u64,
    /// Units (trajectories or records) per split.
    pub split: SplitSizes,
    pub models: Vec<ModelReport>,
    /// Fixed-budget model with budget > 0 and the best validation accuracy.
    pub best_fixed: Option<String>,
    /// L-IBM prior against the generating prior.
    pub recovery: Vec<RecoveryRow>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn model(&self, name: &str) -> Option<&ModelReport> {
        self.models.iter().find(|m| m.model == name)
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub runs: Vec<(String, ModelRun)>,
    pub dataset: Dataset,
}

impl ExperimentOutcome {
    pub fn run(&self, name: &str) -> Option<&ModelRun> {
        self.runs.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}

fn model_report(name: &str, domain: Domain, run: &ModelRun) -> Result<ModelReport> {
    let p = &run.fit.params;
    let mean_budgets = p
        .eta
        .iter()
        .map(|e| Ok(e.probabilities()?.iter().zip(&p.grid).map(|(w, b)| w * b).sum()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ModelReport {
        model: name.to_string(),
        budget_kind: p.budget_kind,
        train_nll: run.fit.train_nll,
        valid_nll: run.fit.valid_nll,
        iterations: run.fit.iterations,
        converged: run.fit.converged,
        learning_rate: run.fit.learning_rate,
        valid: run.valid.clone(),
        test: run.test.clone(),
        mean_budgets,
        rewards: (domain == Domain::Maze).then(|| p.theta.iter().map(|&x| softplus(x)).collect()),
    })
}

/// Generate, split, fit every model variant, evaluate on the test split and,
/// when `out` is given, write the artifacts there.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    config.validate()?;
    let t0 = Instant::now();
    let domain = config.domain.domain();
    let dataset = Dataset::generate(config, config.fit.execution)?;
    let split = split_dataset(config, &dataset)?;
    let mut kinds = vec![ModelKind::Libm, ModelKind::Baseline];
    kinds.extend(config.domain.fixed_budgets().into_iter().map(ModelKind::Fixed));
    // Variants are independent; each keeps its own deterministic reductions.
    let runs = map_slice(config.fit.execution, &kinds, |&kind| {
        with_families(config, &dataset, &split, kind, FitModel { config: &config.fit, kind })
            .map(|r| (kind.name(domain), r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let models = runs.iter().map(|(n, r)| model_report(n, domain, r)).collect::<Result<Vec<_>>>()?;

    let best_fixed = runs
        .iter()
        .filter(|(n, _)| matches!(ModelKind::parse(n), Ok(ModelKind::Fixed(b)) if b > 0))
        .fold(None::<(&String, f64)>, |best, (n, r)| match best {
            Some((_, acc)) if acc >= r.valid.accuracy => best,
            _ => Some((n, r.valid.accuracy)),
        })
        .map(|(n, _)| n.clone());

    let libm = &runs[0].1.fit.params;
    let grid = config.domain.grid();
    let mut recovery = Vec::new();
    for (i, weights) in config.domain.subpopulations().iter().enumerate() {
        let truth = prior_from_weights(grid, weights, i)?.probabilities()?;
        let fitted = libm.eta[i].probabilities()?;
        for (k, b) in libm.grid.iter().enumerate() {
            recovery.push(RecoveryRow { subpop: i, budget: *b, truth: truth[k], fitted: fitted[k] });
        }
    }

    let report = ExperimentReport {
        name: config.name.clone(),
        domain,
        seed: config.seed,
        split: SplitSizes { train: split.train.len(), valid: split.valid.len(), test: split.test.len() },
        models,
        best_fixed,
        recovery,
        wall_time_secs: t0.elapsed().as_secs_f64(),
    };
    let outcome = ExperimentOutcome { report, runs, dataset };
    if let Some(dir) = out {
        write_artifacts(config, &outcome, &split, dir)?;
    }
    Ok(outcome)
}

fn write_artifacts(config: &ExperimentConfig, outcome: &ExperimentOutcome, split: &Split, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), config.to_json_pretty()? + "\n")?;
    outcome.dataset.write(dir.join("data"))?;
    std::fs::write(dir.join("split.json"), serde_json::to_string(split)? + "\n")?;
    let mut metrics = Vec::new();
    let mut sweeps = Vec::new();
    for (name, run) in &outcome.runs {
        std::fs::write(dir.join(format!("fit_{name}.json")), serde_json::to_string_pretty(&run.fit)? + "\n")?;
        let mut csv_bytes = Vec::new();
        run.fit.write_posterior_csv(&mut csv_bytes)?;
        let rows = super::plot::read_posterior_csv(csv_bytes.as_slice())?;
        std::fs::write(dir.join(format!("posterior_{name}.csv")), &csv_bytes)?;
        std::fs::write(dir.join(format!("prior_{name}.svg")), prior_svg(name, &rows))?;
        metrics.extend(MetricsRow::from_metrics(name, "valid", &run.valid));
        metrics.extend(MetricsRow::from_metrics(name, "test", &run.test));
        sweeps.extend(run.sweep.iter().map(|&(learning_rate, valid_nll)| SweepRow {
            model: name.clone(),
            learning_rate,
            valid_nll,
        }));
    }
    write_metrics_csv(std::fs::File::create(dir.join("metrics.csv"))?, &metrics)?;
    let mut w = csv::Writer::from_path(dir.join("recovery.csv")).map_err(csv_error)?;
    for r in &outcome.report.recovery {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    if !sweeps.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv")).map_err(csv_error)?;
        for r in &sweeps {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
    }
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    Ok(())
}

fn prior_svg(model: &str, rows: &[PosteriorRow]) -> String {
    posterior_chart(&format!("fitted prior: {model}"), rows)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data { record: 0, msg: format!("{other:?}") },
    }
}
