use serde::{Deserialize, Serialize};

use super::{generate_maze, Action, Cell, Maze, MazeAgent, MazeRewards};
use crate::anytime::{
    prior_from_weights, sweep_policies, BudgetConditionedPolicy, BudgetGrid, BudgetPrior, BudgetWeight,
};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::rng::{rng_for, sample_categorical, sample_log_categorical};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub cell: Cell,
    pub action: Action,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub maze_id: usize,
    pub subpop_id: usize,
    pub steps: Vec<Step>,
}

/// Full-grid policy sweep for every non-exit cell of one maze.
#[derive(Clone, Debug)]
pub struct MazePolicyTable {
    grid: BudgetGrid,
    policies: Vec<Option<BudgetConditionedPolicy>>,
}

impl MazePolicyTable {
    pub fn build(maze: &Maze, rewards: &MazeRewards, grid: &BudgetGrid, exec: Execution) -> Result<Self> {
        let agent = MazeAgent::new(maze, rewards)?;
        let policies = map_range(exec, maze.num_cells(), |i| {
            let c = maze.cell(i);
            if maze.is_exit(c) {
                return Ok(None);
            }
            let mut p = sweep_policies(&agent, &c, grid)?.policy;
            p.state_id = i;
            Ok(Some(p))
        })
        .into_iter()
        .collect::<Result<_>>()?;
        Ok(Self { grid: grid.clone(), policies })
    }

    pub fn grid(&self) -> &BudgetGrid {
        &self.grid
    }

    pub fn policy(&self, maze: &Maze, c: Cell) -> Option<&BudgetConditionedPolicy> {
        self.policies[maze.index(c)].as_ref()
    }
}

/// Roll out one trajectory: at every step a budget is drawn from `prior`
/// and an action from the truncated-search policy at that budget. Stops on
/// reaching an exit or after `max_steps` steps.
pub fn rollout_with_table(
    table: &MazePolicyTable,
    maze: &Maze,
    prior: &BudgetPrior,
    start: Cell,
    seed: u64,
    max_steps: usize,
) -> Result<Vec<Step>> {
    if !maze.contains(start) {
        return Err(Error::Environment(format!("start {start:?} outside the maze")));
    }
    if prior.len() != table.grid().len() {
        return Err(Error::Contract("prior does not match the policy table grid".into()));
    }
    let weights = prior.probabilities()?;
    let mut rng = rng_for(seed, 0, 0);
    let mut steps = Vec::new();
    let mut cell = start;
    while steps.len() < max_steps && !maze.is_exit(cell) {
        let policy = table.policy(maze, cell).expect("non-exit cell has a policy");
        let k = sample_categorical(&weights, &mut rng);
        let a = sample_log_categorical(policy.log_probs.row(k).as_slice().expect("row-major"), &mut rng);
        let action = Action::from_index(a).expect("four actions");
        steps.push(Step { cell, action });
        cell = maze.neighbor(cell, action).expect("sampled action is legal");
    }
    Ok(steps)
}

/// Single rollout from scratch; see [`rollout_with_table`].
pub fn rollout(
    maze: &Maze,
    rewards: &MazeRewards,
    grid: &BudgetGrid,
    prior: &BudgetPrior,
    start: Cell,
    seed: u64,
    max_steps: usize,
) -> Result<Trajectory> {
    let table = MazePolicyTable::build(maze, rewards, grid, Execution::Sequential)?;
    Ok(Trajectory {
        maze_id: 0,
        subpop_id: prior.subpopulation,
        steps: rollout_with_table(&table, maze, prior, start, seed, max_steps)?,
    })
}

/// Synthetic maze population: one budget distribution per subpopulation,
/// trajectories spread round-robin over `num_mazes` seeded mazes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeDataConfig {
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_exits")]
    pub num_exits: usize,
    #[serde(default = "default_mazes")]
    pub num_mazes: usize,
    /// Effective (positive) exit rewards.
    pub rewards: Vec<f64>,
    pub grid: BudgetGrid,
    pub subpopulations: Vec<Vec<BudgetWeight>>,
    pub trajectories_per_subpop: usize,
    /// Defaults to `4 * width * height`.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_exits() -> usize {
    5
}

fn default_mazes() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeDataset {
    pub mazes: Vec<Maze>,
    pub grid: BudgetGrid,
    pub num_subpops: usize,
    pub trajectories: Vec<Trajectory>,
}

impl MazeDataset {
    pub fn num_records(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }
}

const STREAM_MAZE: u64 = 1;
const STREAM_TRAJ: u64 = 2;

pub fn generate_maze_dataset(config: &MazeDataConfig, seed: u64, exec: Execution) -> Result<MazeDataset> {
    if config.rewards.len() != config.num_exits {
        return Err(Error::Config(format!("{} rewards given for {} exits", config.rewards.len(), config.num_exits)));
    }
    if config.num_mazes == 0 {
        return Err(Error::Config("num_mazes must be positive".into()));
    }
    let rewards = MazeRewards::from_effective(&config.rewards)?;
    let grid = config.grid.clone();
    let priors = config
        .subpopulations
        .iter()
        .enumerate()
        .map(|(i, w)| prior_from_weights(&grid, w, i))
        .collect::<Result<Vec<_>>>()?;
    let mazes = (0..config.num_mazes)
        .map(|m| {
            let s = crate::rng::derive_seed(seed, STREAM_MAZE, m as u64);
            generate_maze(s, config.width, config.height, config.num_exits)
        })
        .collect::<Result<Vec<_>>>()?;
    let tables = mazes.iter().map(|m| MazePolicyTable::build(m, &rewards, &grid, exec)).collect::<Result<Vec<_>>>()?;
    let max_steps = config.max_steps.unwrap_or(4 * config.width * config.height);
    let per = config.trajectories_per_subpop;
    let trajectories = map_range(exec, priors.len() * per, |n| {
        let (i, j) = (n / per, n % per);
        let maze_id = j % mazes.len();
        let maze = &mazes[maze_id];
        let traj_seed = crate::rng::derive_seed(seed, STREAM_TRAJ, n as u64);
        let mut rng = rng_for(traj_seed, 1, 0);
        let starts: Vec<usize> = (0..maze.num_cells()).filter(|&c| !maze.is_exit(maze.cell(c))).collect();
        let start = maze.cell(starts[sample_categorical(&vec![1.0; starts.len()], &mut rng)]);
        let steps = rollout_with_table(&tables[maze_id], maze, &priors[i], start, traj_seed, max_steps)?;
        Ok(Trajectory { maze_id, subpop_id: i, steps })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(MazeDataset { mazes, grid, num_subpops: priors.len(), trajectories })
}
