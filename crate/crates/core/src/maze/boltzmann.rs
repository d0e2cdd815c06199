//! Boltzmann baseline: `Q_temp(a|s) = β_temp · max R(τ)` over complete
//! trajectories that start with `a`. By default a complete trajectory runs
//! until it first reaches an exit and does not step back onto `s`; in a
//! perfect maze that is exactly the subtree behind `a`. Actions whose
//! subtree holds no exit earn reward 0. `ExitReach::Unrestricted` lets
//! trajectories pass back through `s`, so in a connected maze every action
//! reaches every exit and the policy is uniform.

use serde::{Deserialize, Serialize};

use super::{Action, Cell, Maze, MazeRewards};
use crate::error::{Error, Result};

/// Exit indices reachable behind each action (`None` for walls).
pub type BoltzmannExits = [Option<Vec<usize>>; 4];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReach {
    /// Trajectories never step back onto the current cell.
    #[default]
    Subtree,
    /// Any trajectory starting with the action.
    Unrestricted,
}

pub fn reachable_exits(maze: &Maze, s: Cell) -> BoltzmannExits {
    reachable_exits_with(maze, s, ExitReach::Subtree)
}

pub fn reachable_exits_with(maze: &Maze, s: Cell, reach: ExitReach) -> BoltzmannExits {
    Action::ALL.map(|a| {
        let first = maze.neighbor(s, a)?;
        if maze.is_exit(first) {
            return Some(vec![maze.exit_index(first).expect("exit")]);
        }
        let mut seen = vec![false; maze.num_cells()];
        seen[maze.index(s)] = reach == ExitReach::Subtree;
        seen[maze.index(first)] = true;
        let mut stack = vec![first];
        let mut exits = Vec::new();
        while let Some(c) = stack.pop() {
            if let Some(e) = maze.exit_index(c) {
                exits.push(e);
                continue;
            }
            for b in Action::ALL {
                if let Some(n) = maze.neighbor(c, b) {
                    let ni = maze.index(n);
                    if !seen[ni] {
                        seen[ni] = true;
                        stack.push(n);
                    }
                }
            }
        }
        exits.sort_unstable();
        Some(exits)
    })
}

/// Best reward behind each action and the exit attaining it.
pub(crate) fn best_exit(exits: &BoltzmannExits, rewards: &[f64]) -> [Option<(f64, Option<usize>)>; 4] {
    exits.clone().map(|set| {
        set.map(|set| {
            set.iter().fold((0.0, None), |(best, arg), &e| {
                if arg.is_none() || rewards[e] > best {
                    (rewards[e], Some(e))
                } else {
                    (best, arg)
                }
            })
        })
    })
}

pub fn boltzmann_q(s: Cell, beta_temp: f64, maze: &Maze, rewards: &MazeRewards) -> Result<Vec<f64>> {
    boltzmann_q_with(s, beta_temp, maze, rewards, ExitReach::Subtree)
}

pub fn boltzmann_q_with(
    s: Cell,
    beta_temp: f64,
    maze: &Maze,
    rewards: &MazeRewards,
    reach: ExitReach,
) -> Result<Vec<f64>> {
    if !beta_temp.is_finite() {
        return Err(Error::Parameter(format!("beta_temp must be finite, got {beta_temp}")));
    }
    let eff = rewards.effective();
    Ok(best_exit(&reachable_exits_with(maze, s, reach), &eff)
        .iter()
        .map(|b| match b {
            Some((r, _)) => beta_temp * r,
            None => f64::NEG_INFINITY,
        })
        .collect())
}

/// Log of the Boltzmann policy over legal actions.
pub fn boltzmann_log_policy(q: &[f64]) -> Result<Vec<f64>> {
    super::maze_log_policy(q)
}
