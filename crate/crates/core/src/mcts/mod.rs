//! Tic-tac-toe, PUCT tree search with the normalized final policy, and an
//! exact minimax oracle.

mod game;
mod minimax;
mod search;

pub use game::{heuristic_value, Board, Player, LINES};
pub use minimax::MinimaxOracle;
pub use search::{
    final_policy, final_policy_with, mcts_sweep, puct_policies, puct_select, solve_gamma, solve_gamma_with,
    BackupTrace, FinalForm, MctsAgent, MctsParams, PriorPolicy, SearchNode, SearchTree, ValueFunction,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anytime::{prior_from_weights, BudgetConditionedPolicy, BudgetGrid, BudgetWeight};
use crate::error::Result;
use crate::exec::{map_slice, Execution};
use crate::rng::{rng_for, sample_categorical, sample_log_categorical};

/// Exploration coefficients for the fixed-budget baseline.
pub const PUCT_BASELINE_BETAS: [f64; 5] = [0.1, 0.3, 1.0, 3.0, 10.0];
/// Expansion budget of the fixed-budget baseline.
pub const PUCT_BASELINE_BUDGET: u32 = 256;

/// One observed move.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameRecord {
    pub subpop_id: usize,
    pub state: Board,
    pub action_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameDataConfig {
    pub grid: BudgetGrid,
    pub subpopulations: Vec<Vec<BudgetWeight>>,
    pub records_per_subpop: usize,
    #[serde(default)]
    pub params: MctsParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDataset {
    pub grid: BudgetGrid,
    pub params: MctsParams,
    pub num_subpops: usize,
    pub records: Vec<GameRecord>,
}

/// Non-terminal positions reachable from the empty board, sorted.
pub fn reachable_positions() -> Vec<Board> {
    let mut v: Vec<Board> = MinimaxOracle::shared().positions().filter(|b| !b.is_terminal()).copied().collect();
    v.sort_unstable();
    v
}

/// Budget-conditioned policies for a set of positions.
pub fn policy_table(
    boards: &[Board],
    params: &MctsParams,
    grid: &BudgetGrid,
    exec: Execution,
) -> Result<BTreeMap<Board, BudgetConditionedPolicy>> {
    map_slice(exec, boards, |b| mcts_sweep(b, params, grid).map(|o| (*b, o.policy))).into_iter().collect()
}

const STREAM_GAME: u64 = 21;

/// Moves on uniformly drawn reachable positions, each from the search
/// policy at a budget drawn from the subpopulation's prior.
pub fn generate_game_dataset(config: &GameDataConfig, seed: u64, exec: Execution) -> Result<GameDataset> {
    config.params.validate()?;
    let priors = config
        .subpopulations
        .iter()
        .enumerate()
        .map(|(i, w)| prior_from_weights(&config.grid, w, i))
        .collect::<Result<Vec<_>>>()?;
    let positions = reachable_positions();
    let uniform = vec![1.0; positions.len()];
    let draws: Vec<Vec<(Board, usize)>> = priors
        .iter()
        .map(|p| {
            let mut rng = rng_for(seed, STREAM_GAME, p.subpopulation as u64);
            let w = p.probabilities()?;
            Ok((0..config.records_per_subpop)
                .map(|_| (positions[sample_categorical(&uniform, &mut rng)], sample_categorical(&w, &mut rng)))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut needed: Vec<Board> = draws.iter().flatten().map(|(b, _)| *b).collect();
    needed.sort_unstable();
    needed.dedup();
    let table = policy_table(&needed, &config.params, &config.grid, exec)?;
    let mut records = Vec::with_capacity(priors.len() * config.records_per_subpop);
    for (i, subpop) in draws.iter().enumerate() {
        let mut rng = rng_for(seed, STREAM_GAME + 1, i as u64);
        for &(state, k) in subpop {
            let row = table[&state].row(k);
            records.push(GameRecord { subpop_id: i, state, action_index: sample_log_categorical(&row, &mut rng) });
        }
    }
    Ok(GameDataset { grid: config.grid.clone(), params: config.params, num_subpops: priors.len(), records })
}
