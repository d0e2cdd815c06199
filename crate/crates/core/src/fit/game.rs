use ndarray::Array2;

use super::{group_observations, ContextPolicy, Observation, PolicyFamily};
use crate::anytime::BudgetGrid;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::mcts::{mcts_sweep, puct_policies, Board, GameRecord, MctsParams};

/// Family whose policies do not depend on θ: matrices are computed once.
#[derive(Clone, Debug)]
pub struct FixedPolicyFamily {
    policies: Vec<Array2<f64>>,
    observations: Vec<Vec<Observation>>,
    budgets: usize,
}

impl FixedPolicyFamily {
    pub fn new(policies: Vec<Array2<f64>>, observations: Vec<Vec<Observation>>) -> Self {
        let budgets = policies.first().map(|p| p.nrows()).unwrap_or(0);
        Self { policies, observations, budgets }
    }

    /// Grid size to report when there are no contexts to infer it from.
    pub fn with_num_budgets(mut self, k: usize) -> Self {
        self.budgets = k;
        self
    }

    pub fn policy(&self, context: usize) -> &Array2<f64> {
        &self.policies[context]
    }
}

impl PolicyFamily for FixedPolicyFamily {
    type Prepared = ();

    fn num_theta(&self) -> usize {
        0
    }

    fn num_budgets(&self) -> usize {
        self.budgets
    }

    fn observations(&self) -> &[Vec<Observation>] {
        &self.observations
    }

    fn prepare(&self, _: &[f64], _: bool, _: Execution) -> Result<()> {
        Ok(())
    }

    fn evaluate(&self, _: &(), context: usize, _: bool) -> Result<ContextPolicy> {
        Ok(ContextPolicy { log_probs: self.policies[context].clone(), jacobian: None })
    }
}

fn grouped(records: &[GameRecord]) -> Result<(Vec<Board>, Vec<Vec<Observation>>)> {
    for (i, r) in records.iter().enumerate() {
        if !r.state.legal_actions().contains(&r.action_index) {
            return Err(Error::Data { record: i, msg: format!("move {} is illegal in {}", r.action_index, r.state) });
        }
    }
    Ok(group_observations(records.iter().enumerate().map(|(i, r)| (r.state, r.action_index, r.subpop_id, i))))
}

/// Latent expansion budget: one growing tree per distinct position.
pub fn mcts_runtime_family(
    records: &[GameRecord],
    params: &MctsParams,
    grid: &BudgetGrid,
    exec: Execution,
) -> Result<FixedPolicyFamily> {
    let (boards, obs) = grouped(records)?;
    let policies = map_slice(exec, &boards, |b| mcts_sweep(b, params, grid).map(|o| o.policy.log_probs))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPolicyFamily::new(policies, obs).with_num_budgets(grid.len()))
}

/// Latent exploration coefficient at a fixed expansion budget.
pub fn mcts_puct_family(
    records: &[GameRecord],
    params: &MctsParams,
    betas: &[f64],
    budget: u32,
    exec: Execution,
) -> Result<FixedPolicyFamily> {
    let (boards, obs) = grouped(records)?;
    let policies = map_slice(exec, &boards, |b| puct_policies(b, params, betas, budget).map(|p| p.log_probs))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(FixedPolicyFamily::new(policies, obs).with_num_budgets(betas.len()))
}
