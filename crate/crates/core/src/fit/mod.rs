//! Marginal-likelihood fitting of reward/lexicon parameters and
//! per-subpopulation budget priors.
//!
//! A [`PolicyFamily`] turns parameters into a `[budgets × actions]` log
//! policy for each distinct observed context, optionally with its Jacobian
//! with respect to θ. The engine marginalizes the budget under each
//! subpopulation's prior, accumulates the negative log-likelihood and its
//! gradient, and the optimizer runs full-batch gradient descent on it.

mod game;
mod maze;
mod rsa;

pub use game::{mcts_puct_family, mcts_runtime_family, FixedPolicyFamily};
pub use maze::{MazeBoltzmannFamily, MazeRuntimeFamily};
pub use rsa::{RsaFamily, RsaGrid, RsaThetaMode};

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::anytime::{log_softmax, BudgetPrior, LOG_PROB_FLOOR};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::rng::rng_for;

/// What the latent grid enumerates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetKind {
    /// Anytime-inference steps.
    Runtime,
    /// Boltzmann inverse temperature.
    Temp,
    /// PUCT exploration coefficient.
    Puct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Domain parameters (exit rewards, lexicon); empty when fixed.
    pub theta: Vec<f64>,
    /// One prior per subpopulation, all over `grid`.
    pub eta: Vec<BudgetPrior>,
    pub budget_kind: BudgetKind,
    /// Grid values, as numbers, in row order.
    pub grid: Vec<f64>,
}

impl ModelParams {
    pub fn new(theta: Vec<f64>, num_subpops: usize, budget_kind: BudgetKind, grid: Vec<f64>) -> Self {
        let eta = (0..num_subpops).map(|i| BudgetPrior::uniform(grid.len(), i)).collect();
        Self { theta, eta, budget_kind, grid }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut x = self.theta.clone();
        for p in &self.eta {
            x.extend_from_slice(&p.logits);
        }
        x
    }

    fn with_flat(&self, x: &[f64]) -> Self {
        let nt = self.theta.len();
        let k = self.grid.len();
        let mut out = self.clone();
        out.theta.copy_from_slice(&x[..nt]);
        for (i, p) in out.eta.iter_mut().enumerate() {
            p.logits.copy_from_slice(&x[nt + i * k..nt + (i + 1) * k]);
        }
        out
    }
}

/// One observed action in a context, with its multiplicity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub action: usize,
    pub subpop: usize,
    pub count: u32,
    /// Index of the first record that produced this observation.
    pub record: usize,
}

/// Groups `(context key, action, subpop, record index)` tuples into
/// per-context observation lists with counts. Keys are ordered, so context
/// ids do not depend on record order.
pub fn group_observations<K: Ord + Clone>(
    items: impl IntoIterator<Item = (K, usize, usize, usize)>,
) -> (Vec<K>, Vec<Vec<Observation>>) {
    let mut map: BTreeMap<K, BTreeMap<(usize, usize), (u32, usize)>> = BTreeMap::new();
    for (key, action, subpop, record) in items {
        let e = map.entry(key).or_default().entry((action, subpop)).or_insert((0, record));
        e.0 += 1;
        e.1 = e.1.min(record);
    }
    let mut keys = Vec::with_capacity(map.len());
    let mut obs = Vec::with_capacity(map.len());
    for (k, m) in map {
        keys.push(k);
        obs.push(
            m.into_iter()
                .map(|((action, subpop), (count, record))| Observation { action, subpop, count, record })
                .collect(),
        );
    }
    (keys, obs)
}

/// d log π / dθ for the listed θ entries, shaped `[budgets × actions × params]`.
#[derive(Clone, Debug)]
pub struct Jacobian {
    pub params: Vec<usize>,
    pub values: Array3<f64>,
}

#[derive(Clone, Debug)]
pub struct ContextPolicy {
    /// `[budgets × actions]` clamped log probabilities.
    pub log_probs: Array2<f64>,
    pub jacobian: Option<Jacobian>,
}

/// Agent family evaluated on a fixed set of contexts.
pub trait PolicyFamily: Sync {
    /// θ-dependent data shared by all contexts (value tables, per-game
    /// recursions, ...).
    type Prepared: Sync;

    fn num_theta(&self) -> usize;
    fn num_budgets(&self) -> usize;
    fn observations(&self) -> &[Vec<Observation>];
    fn prepare(&self, theta: &[f64], want_grad: bool, exec: Execution) -> Result<Self::Prepared>;
    fn evaluate(&self, prep: &Self::Prepared, context: usize, want_grad: bool) -> Result<ContextPolicy>;

    fn num_contexts(&self) -> usize {
        self.observations().len()
    }

    fn num_records(&self) -> u64 {
        self.observations().iter().flatten().map(|o| o.count as u64).sum()
    }

    fn num_subpops(&self) -> usize {
        self.observations().iter().flatten().map(|o| o.subpop + 1).max().unwrap_or(0)
    }
}

/// NLL and gradients over a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub nll: f64,
    pub grad_theta: Vec<f64>,
    /// `[subpop][budget]` gradient with respect to the prior logits.
    pub grad_eta: Vec<Vec<f64>>,
    pub records: u64,
}

struct Partial {
    nll: f64,
    grad_theta: Vec<f64>,
    grad_eta: Vec<f64>,
}

impl Partial {
    fn zeros(nt: usize, ne: usize) -> Self {
        Self { nll: 0.0, grad_theta: vec![0.0; nt], grad_eta: vec![0.0; ne] }
    }

    fn add(mut self, other: &Partial) -> Self {
        self.nll += other.nll;
        for (a, b) in self.grad_theta.iter_mut().zip(&other.grad_theta) {
            *a += b;
        }
        for (a, b) in self.grad_eta.iter_mut().zip(&other.grad_eta) {
            *a += b;
        }
        self
    }
}

fn check_params<F: PolicyFamily>(family: &F, params: &ModelParams) -> Result<()> {
    if params.theta.len() != family.num_theta() {
        return Err(Error::Contract(format!(
            "{} theta entries for a family with {}",
            params.theta.len(),
            family.num_theta()
        )));
    }
    if params.grid.len() != family.num_budgets() || params.eta.iter().any(|p| p.len() != family.num_budgets()) {
        return Err(Error::Contract("budget prior length differs from the family's grid".into()));
    }
    if family.num_subpops() > params.eta.len() {
        return Err(Error::Contract(format!(
            "data has {} subpopulations but only {} priors were given",
            family.num_subpops(),
            params.eta.len()
        )));
    }
    Ok(())
}

fn context_partial<F: PolicyFamily>(
    family: &F,
    prep: &F::Prepared,
    log_w: &[Vec<f64>],
    c: usize,
    want_grad: bool,
) -> Result<Partial> {
    let k = family.num_budgets();
    let nt = family.num_theta();
    let mut part = Partial::zeros(if want_grad { nt } else { 0 }, if want_grad { log_w.len() * k } else { 0 });
    let pol = family.evaluate(prep, c, want_grad)?;
    let mut joint = vec![0.0; k];
    for o in &family.observations()[c] {
        let w = &log_w[o.subpop];
        for j in 0..k {
            joint[j] = w[j] + pol.log_probs[[j, o.action]];
        }
        let lse = crate::anytime::log_sum_exp(&joint);
        if lse < LOG_PROB_FLOOR / 10.0 {
            return Err(Error::Data {
                record: o.record,
                msg: format!("action {} has zero probability under every budget", o.action),
            });
        }
        let n = o.count as f64;
        part.nll -= n * lse;
        if want_grad {
            for j in 0..k {
                let r = (joint[j] - lse).exp();
                part.grad_eta[o.subpop * k + j] -= n * (r - w[j].exp());
                if let Some(jac) = &pol.jacobian {
                    if r > 0.0 {
                        for (pi, &p) in jac.params.iter().enumerate() {
                            part.grad_theta[p] -= n * r * jac.values[[j, o.action, pi]];
                        }
                    }
                }
            }
        }
    }
    Ok(part)
}

fn evaluate_all<F: PolicyFamily>(
    family: &F,
    params: &ModelParams,
    want_grad: bool,
    exec: Execution,
    deterministic: bool,
) -> Result<Evaluation> {
    check_params(family, params)?;
    let log_w = params.eta.iter().map(|p| p.log_probabilities()).collect::<Result<Vec<_>>>()?;
    let prep = family.prepare(&params.theta, want_grad, exec)?;
    let nt = if want_grad { family.num_theta() } else { 0 };
    let ne = if want_grad { log_w.len() * family.num_budgets() } else { 0 };
    let n = family.num_contexts();
    let total = if deterministic || !exec.is_parallel() {
        // fixed left-to-right reduction over contexts
        map_range(exec, n, |c| context_partial(family, &prep, &log_w, c, want_grad))
            .into_iter()
            .try_fold(Partial::zeros(nt, ne), |acc, p| p.map(|p| acc.add(&p)))?
    } else {
        parallel_reduce(family, &prep, &log_w, want_grad, nt, ne)?
    };
    let k = family.num_budgets();
    Ok(Evaluation {
        nll: total.nll,
        grad_eta: if want_grad { total.grad_eta.chunks(k).map(<[f64]>::to_vec).collect() } else { Vec::new() },
        grad_theta: total.grad_theta,
        records: family.num_records(),
    })
}

#[cfg(feature = "parallel")]
fn parallel_reduce<F: PolicyFamily>(
    family: &F,
    prep: &F::Prepared,
    log_w: &[Vec<f64>],
    want_grad: bool,
    nt: usize,
    ne: usize,
) -> Result<Partial> {
    use rayon::prelude::*;
    (0..family.num_contexts())
        .into_par_iter()
        .map(|c| context_partial(family, prep, log_w, c, want_grad))
        .try_reduce(|| Partial::zeros(nt, ne), |a, b| Ok(a.add(&b)))
}

#[cfg(not(feature = "parallel"))]
fn parallel_reduce<F: PolicyFamily>(
    family: &F,
    prep: &F::Prepared,
    log_w: &[Vec<f64>],
    want_grad: bool,
    nt: usize,
    ne: usize,
) -> Result<Partial> {
    (0..family.num_contexts())
        .map(|c| context_partial(family, prep, log_w, c, want_grad))
        .try_fold(Partial::zeros(nt, ne), |acc, p| p.map(|p| acc.add(&p)))
}

/// Total negative log marginal likelihood.
pub fn marginal_nll<F: PolicyFamily>(family: &F, params: &ModelParams, exec: Execution) -> Result<f64> {
    Ok(evaluate_all(family, params, false, exec, true)?.nll)
}

/// NLL with its gradients for θ and the prior logits.
pub fn grad_params<F: PolicyFamily>(
    family: &F,
    params: &ModelParams,
    exec: Execution,
    deterministic: bool,
) -> Result<Evaluation> {
    evaluate_all(family, params, true, exec, deterministic)
}

/// Average posterior over budgets of each subpopulation's records.
pub fn budget_posteriors<F: PolicyFamily>(family: &F, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    check_params(family, params)?;
    let k = family.num_budgets();
    let log_w = params.eta.iter().map(|p| p.log_probabilities()).collect::<Result<Vec<_>>>()?;
    let prep = family.prepare(&params.theta, false, Execution::Sequential)?;
    let mut post = vec![vec![0.0; k]; params.eta.len()];
    let mut counts = vec![0.0; params.eta.len()];
    for c in 0..family.num_contexts() {
        let pol = family.evaluate(&prep, c, false)?;
        for o in &family.observations()[c] {
            let joint: Vec<f64> = (0..k).map(|j| log_w[o.subpop][j] + pol.log_probs[[j, o.action]]).collect();
            for (j, lp) in log_softmax(&joint).into_iter().enumerate() {
                post[o.subpop][j] += o.count as f64 * lp.exp();
            }
            counts[o.subpop] += o.count as f64;
        }
    }
    for (row, n) in post.iter_mut().zip(counts) {
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(post)
}

/// Full-batch update rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    GradientDescent,
    /// Adam with the usual moment decays (0.9, 0.999), eps 1e-8.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the mean NLL improves by less than this.
    pub tolerance: f64,
    pub seed: u64,
    /// Fixed reduction order for bit-identical results.
    pub deterministic: bool,
    /// Rates tried by a sweep; empty means `[learning_rate]`.
    pub learning_rates: Vec<f64>,
    pub optimizer: Optimizer,
    /// Armijo backtracking with step growth; off means fixed steps.
    /// Only used by gradient descent.
    pub line_search: bool,
    /// L2 penalty on the prior logits.
    pub l2_eta: f64,
    pub freeze_theta: bool,
    pub freeze_eta: bool,
    /// Uniform noise of this half-width added to θ before fitting.
    pub init_jitter: f64,
    /// Extra jittered starts; the best train NLL wins.
    pub restarts: usize,
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            max_iters: 500,
            tolerance: 1e-9,
            seed: 0,
            deterministic: true,
            learning_rates: Vec::new(),
            optimizer: Optimizer::GradientDescent,
            line_search: true,
            l2_eta: 0.0,
            freeze_theta: false,
            freeze_eta: false,
            init_jitter: 0.0,
            restarts: 0,
            execution: Execution::Parallel,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = if self.learning_rates.is_empty() {
            std::slice::from_ref(&self.learning_rate)
        } else {
            &self.learning_rates
        };
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config(format!("learning rates must be positive, got {rates:?}")));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Config(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.l2_eta.is_finite() && self.l2_eta >= 0.0)
            || !(self.init_jitter.is_finite() && self.init_jitter >= 0.0)
        {
            return Err(Error::Config("l2_eta and init_jitter must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub fn sweep_rates(&self) -> Vec<f64> {
        if self.learning_rates.is_empty() {
            vec![self.learning_rate]
        } else {
            self.learning_rates.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub train_nll: f64,
    #[serde(default)]
    pub valid_nll: Option<f64>,
    /// Total train NLL before the first step and after each step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub learning_rate: f64,
    pub wall_time_secs: f64,
}

impl FitResult {
    /// Fitted prior probabilities as `subpop,budget,probability` rows.
    pub fn write_posterior_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "subpop,budget,probability")?;
        for p in &self.params.eta {
            for (b, w) in self.params.grid.iter().zip(p.probabilities()?) {
                writeln!(out, "{},{},{}", p.subpopulation, b, w)?;
            }
        }
        Ok(())
    }
}

struct Objective<'a, F: PolicyFamily> {
    family: &'a F,
    base: &'a ModelParams,
    config: &'a FitConfig,
    n: f64,
}

impl<F: PolicyFamily> Objective<'_, F> {
    fn penalty(&self, x: &[f64]) -> f64 {
        self.config.l2_eta * x[self.base.theta.len()..].iter().map(|v| v * v).sum::<f64>()
    }

    /// (objective, total NLL)
    fn value(&self, x: &[f64]) -> Result<(f64, f64)> {
        let p = self.base.with_flat(x);
        let e = evaluate_all(self.family, &p, false, self.config.execution, self.config.deterministic)?;
        Ok((e.nll / self.n + self.penalty(x), e.nll))
    }

    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, f64, Vec<f64>)> {
        let p = self.base.with_flat(x);
        let e = evaluate_all(self.family, &p, true, self.config.execution, self.config.deterministic)?;
        let nt = self.base.theta.len();
        let mut g = Vec::with_capacity(x.len());
        g.extend(e.grad_theta.iter().map(|v| if self.config.freeze_theta { 0.0 } else { v / self.n }));
        for (i, v) in e.grad_eta.iter().flatten().enumerate() {
            g.push(if self.config.freeze_eta { 0.0 } else { v / self.n + 2.0 * self.config.l2_eta * x[nt + i] });
        }
        Ok((e.nll / self.n + self.penalty(x), e.nll, g))
    }
}

fn diverged(f: f64, f0: f64) -> bool {
    !f.is_finite() || f > 100.0 * f0.max(1.0)
}

fn descend<F: PolicyFamily>(family: &F, config: &FitConfig, start: &ModelParams, rate: f64) -> Result<FitResult> {
    let t0 = Instant::now();
    let n = family.num_records();
    if n == 0 {
        return Ok(FitResult {
            params: start.clone(),
            train_nll: 0.0,
            valid_nll: None,
            trace: vec![0.0],
            iterations: 0,
            converged: true,
            learning_rate: rate,
            wall_time_secs: t0.elapsed().as_secs_f64(),
        });
    }
    let obj = Objective { family, base: start, config, n: n as f64 };
    let mut x = start.flatten();
    let (mut f, mut nll, mut g) = obj.value_and_grad(&x)?;
    let f0 = f;
    if !f.is_finite() {
        return Err(Error::Optimization { msg: "initial objective is not finite".into(), trace: vec![nll] });
    }
    let mut trace = vec![nll];
    let mut step = rate;
    let mut adam_m = vec![0.0; x.len()];
    let mut adam_v = vec![0.0; x.len()];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if g2 == 0.0 {
            converged = true;
            break;
        }
        let (xn, fn_, nlln) = if config.optimizer == Optimizer::Adam {
            let t = (iterations + 1) as i32;
            for ((m, v), gi) in adam_m.iter_mut().zip(adam_v.iter_mut()).zip(&g) {
                *m = 0.9 * *m + 0.1 * gi;
                *v = 0.999 * *v + 0.001 * gi * gi;
            }
            let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
            let cand: Vec<f64> = x
                .iter()
                .zip(adam_m.iter().zip(&adam_v))
                .map(|(a, (m, v))| a - rate * (m / c1) / ((v / c2).sqrt() + 1e-8))
                .collect();
            if cand.iter().any(|v| !v.is_finite()) {
                trace.push(f64::INFINITY);
                return Err(Error::Optimization { msg: format!("diverged at learning rate {rate}"), trace });
            }
            let (fc, nc) = obj.value(&cand)?;
            (cand, fc, nc)
        } else if config.line_search {
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                let (fc, nc) = obj.value(&cand)?;
                if fc.is_finite() && fc <= f - 1e-4 * step * g2 {
                    accepted = Some((cand, fc, nc));
                    break;
                }
                step *= 0.5;
            }
            match accepted {
                Some(a) => a,
                None => {
                    converged = true;
                    break;
                }
            }
        } else {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            if cand.iter().any(|v| !v.is_finite()) {
                trace.push(f64::INFINITY);
                return Err(Error::Optimization { msg: format!("diverged at learning rate {rate}"), trace });
            }
            let (fc, nc) = obj.value(&cand)?;
            (cand, fc, nc)
        };
        iterations += 1;
        trace.push(nlln);
        if diverged(fn_, f0) || xn.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimization { msg: format!("diverged at learning rate {rate}"), trace });
        }
        let improvement = f - fn_;
        x = xn;
        nll = nlln;
        if config.line_search && config.optimizer == Optimizer::GradientDescent {
            step *= 2.0;
        }
        if improvement.abs() < config.tolerance {
            f = fn_;
            converged = true;
            break;
        }
        let (fg, ng, gg) = obj.value_and_grad(&x)?;
        f = fg;
        nll = ng;
        g = gg;
    }
    let _ = f;
    Ok(FitResult {
        params: start.with_flat(&x),
        train_nll: nll,
        valid_nll: None,
        trace,
        iterations,
        converged,
        learning_rate: rate,
        wall_time_secs: t0.elapsed().as_secs_f64(),
    })
}

/// Full-batch gradient descent on the mean marginal NLL from `params0`,
/// plus `restarts` jittered starts; the lowest train NLL is returned.
pub fn fit<F: PolicyFamily>(family: &F, config: &FitConfig, params0: &ModelParams) -> Result<FitResult> {
    fit_at_rate(family, config, params0, config.learning_rate)
}

pub fn fit_at_rate<F: PolicyFamily>(
    family: &F,
    config: &FitConfig,
    params0: &ModelParams,
    rate: f64,
) -> Result<FitResult> {
    config.validate()?;
    check_params(family, params0)?;
    let t0 = Instant::now();
    let mut best: Option<FitResult> = None;
    for r in 0..=config.restarts {
        let mut start = params0.clone();
        if config.init_jitter > 0.0 && !config.freeze_theta {
            use rand::Rng;
            let mut rng = rng_for(config.seed, 31, r as u64);
            for v in &mut start.theta {
                *v += rng.gen_range(-config.init_jitter..=config.init_jitter);
            }
        }
        let res = descend(family, config, &start, rate)?;
        if best.as_ref().is_none_or(|b| res.train_nll < b.train_nll) {
            best = Some(res);
        }
    }
    let mut best = best.expect("at least one start");
    best.wall_time_secs = t0.elapsed().as_secs_f64();
    Ok(best)
}

/// Boltzmann-style baseline: the same fit with a temperature or
/// exploration-coefficient grid in place of runtimes.
pub fn fit_boltzmann<F: PolicyFamily>(family: &F, config: &FitConfig, params0: &ModelParams) -> Result<FitResult> {
    if params0.budget_kind == BudgetKind::Runtime {
        return Err(Error::Contract("fit_boltzmann needs a temperature or puct grid".into()));
    }
    fit(family, config, params0)
}

/// Every prior frozen as a point mass at grid row `budget_index`; only θ is
/// fitted.
pub fn fixed_budget_baseline<F: PolicyFamily>(
    family: &F,
    config: &FitConfig,
    params0: &ModelParams,
    budget_index: usize,
) -> Result<FitResult> {
    let k = params0.grid.len();
    if budget_index >= k {
        return Err(Error::Contract(format!("budget index {budget_index} outside a grid of {k}")));
    }
    let mut p = params0.clone();
    for prior in &mut p.eta {
        *prior = BudgetPrior::point_mass(k, budget_index, prior.subpopulation);
    }
    fit(family, &FitConfig { freeze_eta: true, ..config.clone() }, &p)
}

/// Argmax accuracy and mean NLL of the marginal policy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_nll: f64,
    pub records: u64,
    pub per_subpop: Vec<SubpopMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubpopMetrics {
    pub subpop: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub records: u64,
}

/// Exact-match accuracy (argmax of the marginal, ties to the lowest action)
/// and mean NLL, overall and per subpopulation.
pub fn evaluate_metrics<F: PolicyFamily>(family: &F, params: &ModelParams, exec: Execution) -> Result<Metrics> {
    check_params(family, params)?;
    let s = params.eta.len();
    let prep = family.prepare(&params.theta, false, exec)?;
    let parts = map_range(exec, family.num_contexts(), |c| -> Result<Vec<(usize, f64, f64, f64)>> {
        let pol = family.evaluate(&prep, c, false)?;
        let a_n = pol.log_probs.ncols();
        let mut out = Vec::new();
        for o in &family.observations()[c] {
            let m = crate::anytime::BudgetConditionedPolicy { log_probs: pol.log_probs.clone(), state_id: c }
                .marginal(&params.eta[o.subpop])?;
            let arg = (0..a_n).fold(0, |b, a| if m[a] > m[b] { a } else { b });
            let n = o.count as f64;
            out.push((
                o.subpop,
                n,
                if arg == o.action { n } else { 0.0 },
                -n * m[o.action].max(f64::MIN_POSITIVE).ln(),
            ));
        }
        Ok(out)
    });
    let mut hits = vec![0.0; s];
    let mut nll = vec![0.0; s];
    let mut cnt = vec![0.0; s];
    for part in parts {
        for (i, n, h, l) in part? {
            cnt[i] += n;
            hits[i] += h;
            nll[i] += l;
        }
    }
    let total: f64 = cnt.iter().sum();
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(Metrics {
        accuracy: ratio(hits.iter().sum(), total),
        mean_nll: ratio(nll.iter().sum(), total),
        records: total as u64,
        per_subpop: (0..s)
            .map(|i| SubpopMetrics {
                subpop: i,
                accuracy: ratio(hits[i], cnt[i]),
                mean_nll: ratio(nll[i], cnt[i]),
                records: cnt[i] as u64,
            })
            .collect(),
    })
}

/// Fit once per rate and keep the result with the lowest validation NLL.
/// Diverged rates are skipped.
pub fn sweep<F: PolicyFamily>(
    train: &F,
    valid: &F,
    config: &FitConfig,
    params0: &ModelParams,
) -> Result<(FitResult, Vec<(f64, Option<f64>)>)> {
    let mut best: Option<FitResult> = None;
    let mut log = Vec::new();
    for rate in config.sweep_rates() {
        match fit_at_rate(train, config, params0, rate) {
            Ok(mut r) => {
                let v = marginal_nll(valid, &r.params, config.execution)?;
                r.valid_nll = Some(v);
                log.push((rate, Some(v)));
                if best.as_ref().is_none_or(|b| v < b.valid_nll.unwrap_or(f64::INFINITY)) {
                    best = Some(r);
                }
            }
            Err(Error::Optimization { .. }) => log.push((rate, None)),
            Err(e) => return Err(e),
        }
    }
    best.map(|b| (b, log))
        .ok_or_else(|| Error::Sweep(format!("all {} learning rates diverged", config.sweep_rates().len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Fixed policies for unit tests of the engine.
    fn fixed(rows: Vec<Vec<Vec<f64>>>, obs: Vec<Vec<Observation>>) -> FixedPolicyFamily {
        let policies = rows
            .into_iter()
            .map(|r| {
                crate::anytime::BudgetConditionedPolicy::from_rows(
                    &r.iter().map(|row| row.iter().map(|p: &f64| p.ln()).collect()).collect::<Vec<_>>(),
                    0,
                )
                .unwrap()
                .log_probs
            })
            .collect();
        FixedPolicyFamily::new(policies, obs)
    }

    fn ob(action: usize, subpop: usize, count: u32) -> Observation {
        Observation { action, subpop, count, record: 0 }
    }

    #[test]
    fn nll_examples() {
        let f = fixed(vec![vec![vec![0.7, 0.3], vec![0.2, 0.8]]], vec![vec![ob(1, 0, 1)]]);
        let mut p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0, 1.0]);
        p.eta[0] = BudgetPrior::point_mass(2, 1, 0);
        assert_relative_eq!(marginal_nll(&f, &p, Execution::Sequential).unwrap(), -(0.8f64.ln()), epsilon = 1e-9);
        p.eta[0] = BudgetPrior::from_probabilities(&[0.25, 0.75], 0).unwrap();
        let hand = -(0.25 * 0.3 + 0.75 * 0.8f64).ln();
        assert_relative_eq!(marginal_nll(&f, &p, Execution::Sequential).unwrap(), hand, epsilon = 1e-12);
        let doubled = fixed(vec![vec![vec![0.7, 0.3], vec![0.2, 0.8]]], vec![vec![ob(1, 0, 2)]]);
        assert_relative_eq!(marginal_nll(&doubled, &p, Execution::Sequential).unwrap(), 2.0 * hand, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_budgets_give_zero_eta_gradient() {
        let f = fixed(vec![vec![vec![0.6, 0.4], vec![0.6, 0.4]]], vec![vec![ob(0, 0, 3), ob(1, 0, 2)]]);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0, 1.0]);
        let e = grad_params(&f, &p, Execution::Sequential, true).unwrap();
        assert!((e.grad_eta[0][0] - e.grad_eta[0][1]).abs() < 1e-15);
    }

    #[test]
    fn eta_gradient_matches_finite_differences() {
        let f = fixed(
            vec![
                vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6], vec![0.3, 0.3, 0.4]],
                vec![vec![0.5, 0.5, 1e-12], vec![0.2, 0.2, 0.6], vec![0.9, 0.05, 0.05]],
            ],
            vec![vec![ob(0, 0, 2), ob(2, 1, 1)], vec![ob(1, 0, 1), ob(0, 1, 4)]],
        );
        let mut p = ModelParams::new(vec![], 2, BudgetKind::Runtime, vec![0.0, 1.0, 2.0]);
        p.eta[0].logits = vec![0.3, -0.2, 0.5];
        p.eta[1].logits = vec![-1.0, 0.4, 0.0];
        let e = grad_params(&f, &p, Execution::Sequential, true).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let h = 1e-5;
                let mut up = p.clone();
                up.eta[i].logits[j] += h;
                let mut dn = p.clone();
                dn.eta[i].logits[j] -= h;
                let fd = (marginal_nll(&f, &up, Execution::Sequential).unwrap()
                    - marginal_nll(&f, &dn, Execution::Sequential).unwrap())
                    / (2.0 * h);
                assert_relative_eq!(e.grad_eta[i][j], fd, epsilon = 1e-8, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn impossible_action_is_a_data_error() {
        let f =
            fixed(vec![vec![vec![1.0, 0.0]]], vec![vec![Observation { action: 1, subpop: 0, count: 1, record: 7 }]]);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0]);
        assert!(matches!(marginal_nll(&f, &p, Execution::Sequential), Err(Error::Data { record: 7, .. })));
    }

    #[test]
    fn empty_dataset_fit_is_a_no_op() {
        let f = fixed(vec![], vec![]).with_num_budgets(2);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0, 1.0]);
        let r = fit(&f, &FitConfig::default(), &p).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.train_nll, 0.0);
    }

    #[test]
    fn fit_moves_mass_and_trace_is_monotone() {
        let f = fixed(vec![vec![vec![0.9, 0.1], vec![0.1, 0.9]]], vec![vec![ob(1, 0, 80), ob(0, 0, 20)]]);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0, 1.0]);
        let r = fit(&f, &FitConfig { max_iters: 2000, ..Default::default() }, &p).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let w = r.params.eta[0].probabilities().unwrap();
        // mixture weight on the second row solving 0.1 + 0.8 w = 0.8
        assert_relative_eq!(w[1], 0.875, epsilon = 1e-3);
        let fixed0 = fixed_budget_baseline(&f, &FitConfig::default(), &p, 0).unwrap();
        assert_relative_eq!(fixed0.train_nll, -(80.0 * 0.1f64.ln() + 20.0 * 0.9f64.ln()), epsilon = 1e-9);
    }

    #[test]
    fn sweep_skips_divergent_rates() {
        let f = fixed(vec![vec![vec![0.9, 0.1], vec![0.1, 0.9]]], vec![vec![ob(1, 0, 80), ob(0, 0, 20)]]);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0, 1.0]);
        let cfg = FitConfig { line_search: false, learning_rates: vec![0.5], max_iters: 50, ..Default::default() };
        let (single, _) = sweep(&f, &f, &cfg, &p).unwrap();
        let plain = fit_at_rate(&f, &cfg, &p, 0.5).unwrap();
        assert_eq!(single.trace, plain.trace);
        let cfg = FitConfig { learning_rates: vec![f64::MAX / 4.0, 0.5], ..cfg };
        let (best, log) = sweep(&f, &f, &cfg, &p).unwrap();
        assert_eq!(best.learning_rate, 0.5);
        assert!(log[0].1.is_none());
        let cfg = FitConfig { learning_rates: vec![f64::MAX / 4.0], ..cfg };
        assert!(matches!(sweep(&f, &f, &cfg, &p), Err(Error::Sweep(_))));
    }

    #[test]
    fn metrics_examples() {
        let f = fixed(vec![vec![vec![0.25; 4]]], vec![vec![ob(0, 0, 1), ob(3, 0, 3)]]);
        let p = ModelParams::new(vec![], 1, BudgetKind::Runtime, vec![0.0]);
        let m = evaluate_metrics(&f, &p, Execution::Sequential).unwrap();
        assert_relative_eq!(m.mean_nll, 4f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(m.accuracy, 0.25);
        let total = marginal_nll(&f, &p, Execution::Sequential).unwrap();
        assert_relative_eq!(m.mean_nll, total / 4.0, epsilon = 1e-12);
    }
}
