//! The anytime-inference contract shared by every agent, and the
//! budget-marginal likelihood built on top of it.
//!
//! An agent exposes an inference state that is advanced one budget unit at a
//! time. [`sweep_policies`] walks a single state up to the largest budget in a
//! grid and snapshots the action distribution each time it passes a grid
//! value, so a whole grid costs exactly as much as one run at its maximum.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to log probabilities before any log-sum-exp.
pub const LOG_PROB_FLOOR: f64 = -1e9;

#[inline]
pub fn clamp_log(x: f64) -> f64 {
    if x.is_nan() || x < LOG_PROB_FLOOR {
        LOG_PROB_FLOOR
    } else {
        x
    }
}

/// `log Σ exp(x)`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Log-softmax. Entries equal to `-inf` stay `-inf` (excluded actions).
pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

/// Strictly increasing, nonempty list of nonnegative integer budgets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct BudgetGrid {
    values: Vec<u32>,
}

impl BudgetGrid {
    pub fn new(values: Vec<u32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("budget grid must be nonempty".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("budget grid must be strictly increasing, got {values:?}")));
        }
        Ok(Self { values })
    }

    /// Search depths 0..=20.
    pub fn maze_default() -> Self {
        Self { values: (0..=20).collect() }
    }

    /// Recursion levels 0..=3.
    pub fn rsa_default() -> Self {
        Self { values: vec![0, 1, 2, 3] }
    }

    /// Expansion counts 0, 1, 2, 4, ..., 256.
    pub fn mcts_default() -> Self {
        let mut values = vec![0];
        values.extend((0..=8).map(|p| 1u32 << p));
        Self { values }
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> u32 {
        *self.values.last().expect("grid is nonempty")
    }

    pub fn position(&self, budget: u32) -> Option<usize> {
        self.values.binary_search(&budget).ok()
    }
}

impl TryFrom<Vec<u32>> for BudgetGrid {
    type Error = Error;
    fn try_from(values: Vec<u32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<BudgetGrid> for Vec<u32> {
    fn from(g: BudgetGrid) -> Self {
        g.values
    }
}

/// Categorical prior over a budget grid, parameterized by unconstrained
/// logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPrior {
    pub logits: Vec<f64>,
    pub subpopulation: usize,
}

impl BudgetPrior {
    pub fn new(logits: Vec<f64>, subpopulation: usize) -> Result<Self> {
        let prior = Self { logits, subpopulation };
        prior.check()?;
        Ok(prior)
    }

    pub fn uniform(len: usize, subpopulation: usize) -> Self {
        Self { logits: vec![0.0; len], subpopulation }
    }

    /// Prior that puts all its mass on grid position `index`. The other
    /// logits sit at [`LOG_PROB_FLOOR`], so their probabilities underflow to
    /// exactly zero and mixtures reduce to the selected row bit-for-bit.
    pub fn point_mass(len: usize, index: usize, subpopulation: usize) -> Self {
        let mut logits = vec![LOG_PROB_FLOOR; len];
        logits[index] = 0.0;
        Self { logits, subpopulation }
    }

    /// Prior from a probability vector (zeros become point-mass floors).
    pub fn from_probabilities(probs: &[f64], subpopulation: usize) -> Result<Self> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || probs.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Parameter(format!("invalid probability vector {probs:?}")));
        }
        let logits = probs.iter().map(|&p| clamp_log(p.ln())).collect();
        Ok(Self { logits, subpopulation })
    }

    fn check(&self) -> Result<()> {
        if self.logits.is_empty() {
            return Err(Error::Parameter("budget prior has no logits".into()));
        }
        if let Some(x) = self.logits.iter().find(|x| !x.is_finite()) {
            return Err(Error::Parameter(format!(
                "non-finite logit {x} in prior for subpopulation {}",
                self.subpopulation
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_probabilities(&self) -> Result<Vec<f64>> {
        self.check()?;
        Ok(log_softmax(&self.logits))
    }

    pub fn probabilities(&self) -> Result<Vec<f64>> {
        self.check()?;
        Ok(softmax(&self.logits))
    }

    /// Expected budget under this prior.
    pub fn mean_budget(&self, grid: &BudgetGrid) -> Result<f64> {
        let p = self.probabilities()?;
        Ok(p.iter().zip(grid.values()).map(|(p, &b)| p * b as f64).sum())
    }
}

/// Softmax of the prior's logits.
pub fn budget_prior_probs(prior: &BudgetPrior) -> Result<Vec<f64>> {
    prior.probabilities()
}

/// One `(budget, weight)` component of a ground-truth budget distribution,
/// as written in generator configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetWeight {
    pub budget: u32,
    pub weight: f64,
}

/// Ground-truth prior over `grid` from weighted budgets. Budgets missing
/// from the list get zero mass.
pub fn prior_from_weights(grid: &BudgetGrid, weights: &[BudgetWeight], subpopulation: usize) -> Result<BudgetPrior> {
    let mut probs = vec![0.0; grid.len()];
    for w in weights {
        let k = grid
            .position(w.budget)
            .ok_or_else(|| Error::Config(format!("budget {} is not on the grid {:?}", w.budget, grid.values())))?;
        probs[k] += w.weight;
    }
    let total: f64 = probs.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("budget weights must have positive total".into()));
    }
    probs.iter_mut().for_each(|p| *p /= total);
    BudgetPrior::from_probabilities(&probs, subpopulation)
}

/// Log action probabilities for every budget in a grid at one state:
/// row `k` is the distribution after `grid[k]` inference steps.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetConditionedPolicy {
    pub log_probs: Array2<f64>,
    pub state_id: usize,
}

impl BudgetConditionedPolicy {
    /// Build from per-budget log-probability rows; entries are clamped at
    /// [`LOG_PROB_FLOOR`].
    pub fn from_rows(rows: &[Vec<f64>], state_id: usize) -> Result<Self> {
        let num_actions = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || num_actions == 0 {
            return Err(Error::Contract("policy needs at least one row and one action".into()));
        }
        if rows.iter().any(|r| r.len() != num_actions) {
            return Err(Error::Contract("ragged policy rows".into()));
        }
        let data = rows.iter().flatten().map(|&x| clamp_log(x)).collect();
        let log_probs =
            Array2::from_shape_vec((rows.len(), num_actions), data).map_err(|e| Error::Contract(e.to_string()))?;
        Ok(Self { log_probs, state_id })
    }

    pub fn num_budgets(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.log_probs.row(k).to_vec()
    }

    /// Marginal action distribution under a prior (linear space).
    pub fn marginal(&self, prior: &BudgetPrior) -> Result<Vec<f64>> {
        (0..self.num_actions()).map(|a| mixture_log_prob(self, prior, a).map(f64::exp)).collect()
    }
}

/// `log Σ_β p(β|η) π(a|s; β)`, computed in log space.
pub fn mixture_log_prob(policy: &BudgetConditionedPolicy, prior: &BudgetPrior, action: usize) -> Result<f64> {
    if prior.len() != policy.num_budgets() {
        return Err(Error::Contract(format!(
            "prior has {} budgets but policy has {} rows",
            prior.len(),
            policy.num_budgets()
        )));
    }
    if action >= policy.num_actions() {
        return Err(Error::Contract(format!("action {action} out of range for {} actions", policy.num_actions())));
    }
    let log_w = prior.log_probabilities()?;
    let terms: Vec<f64> =
        log_w.iter().enumerate().map(|(k, &lw)| clamp_log(lw) + policy.log_probs[[k, action]]).collect();
    Ok(log_sum_exp(&terms))
}

/// An iterative inference procedure whose state after `k` steps yields an
/// action distribution, and which is advanced one step at a time.
pub trait AnytimeAgent {
    /// Environment state the agent acts in.
    type State;
    /// Algorithm-specific inference payload.
    type Inference;

    fn num_actions(&self, state: &Self::State) -> usize;

    /// Inference state at budget 0. Fails if the state has no legal action.
    fn start(&self, state: &Self::State) -> Result<Self::Inference>;

    /// Advance by exactly one budget unit.
    fn advance(&self, state: &Self::State, inference: &mut Self::Inference);

    /// Number of budget units consumed so far.
    fn steps(&self, inference: &Self::Inference) -> u32;

    /// Work counter (expansions, normalizations, ...). Extraction must not
    /// change it.
    fn work(&self, inference: &Self::Inference) -> u64;

    /// Log action distribution at the current budget. Read-only.
    fn extract(&self, state: &Self::State, inference: &Self::Inference) -> Result<Vec<f64>>;
}

/// Result of a grid sweep: the policy matrix plus the agent's work counter.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub policy: BudgetConditionedPolicy,
    pub work: u64,
}

/// One inference run to `max(grid)`, snapshotting the policy at each grid
/// value on the way.
pub fn sweep_policies<A: AnytimeAgent>(agent: &A, state: &A::State, grid: &BudgetGrid) -> Result<SweepOutcome> {
    let mut inference = agent.start(state)?;
    let mut rows = Vec::with_capacity(grid.len());
    for &budget in grid.values() {
        while agent.steps(&inference) < budget {
            agent.advance(state, &mut inference);
        }
        rows.push(agent.extract(state, &inference)?);
    }
    Ok(SweepOutcome { policy: BudgetConditionedPolicy::from_rows(&rows, 0)?, work: agent.work(&inference) })
}

/// Independent run truncated at `budget`; returns clamped log probabilities
/// and the work counter.
pub fn run_fixed_budget<A: AnytimeAgent>(agent: &A, state: &A::State, budget: u32) -> Result<(Vec<f64>, u64)> {
    let mut inference = agent.start(state)?;
    while agent.steps(&inference) < budget {
        agent.advance(state, &mut inference);
    }
    let row = agent.extract(state, &inference)?.into_iter().map(clamp_log).collect();
    Ok((row, agent.work(&inference)))
}
