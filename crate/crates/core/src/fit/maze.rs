use ndarray::{Array2, Array3};

use super::{group_observations, ContextPolicy, Jacobian, Observation, PolicyFamily};
use crate::anytime::{clamp_log, BudgetGrid};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::maze::{
    best_exit, maze_log_policy, reachable_exits_with, sigmoid, softplus, BoltzmannExits, ExitReach, Maze, MazeRewards,
    TbfsLayers, Trajectory, ValueTable,
};

/// Distinct `(maze, cell)` contexts with their observations.
struct MazeContexts {
    mazes: Vec<Maze>,
    keys: Vec<(usize, usize)>,
    observations: Vec<Vec<Observation>>,
    num_exits: usize,
}

impl MazeContexts {
    fn build(mazes: &[Maze], trajectories: &[Trajectory]) -> Result<Self> {
        let num_exits = mazes.first().map(Maze::num_exits).unwrap_or(0);
        if mazes.iter().any(|m| m.num_exits() != num_exits) {
            return Err(Error::Contract("all mazes must share the number of exits".into()));
        }
        let mut items = Vec::new();
        let mut record = 0;
        for t in trajectories {
            let maze = mazes
                .get(t.maze_id)
                .ok_or_else(|| Error::Data { record, msg: format!("unknown maze id {}", t.maze_id) })?;
            for s in &t.steps {
                if !maze.contains(s.cell) || maze.is_exit(s.cell) || maze.neighbor(s.cell, s.action).is_none() {
                    return Err(Error::Data {
                        record,
                        msg: format!("action {:?} is not legal at {:?} in maze {}", s.action, s.cell, t.maze_id),
                    });
                }
                items.push(((t.maze_id, maze.index(s.cell)), s.action.index(), t.subpop_id, record));
                record += 1;
            }
        }
        let (keys, observations) = group_observations(items);
        Ok(Self { mazes: mazes.to_vec(), keys, observations, num_exits })
    }
}

/// Log-softmax rows over legal actions and, optionally, their derivatives
/// given per-action dQ/dθ.
fn softmax_rows(qs: &[[f64; 4]], dq: Option<&[[Option<Vec<f64>>; 4]]>, p: usize) -> Result<ContextPolicy> {
    let k = qs.len();
    let mut lp = Array2::zeros((k, 4));
    let mut jac = dq.map(|_| Array3::zeros((k, 4, p)));
    for (j, q) in qs.iter().enumerate() {
        let row = maze_log_policy(q)?;
        for a in 0..4 {
            lp[[j, a]] = clamp_log(row[a]);
        }
        if let (Some(jac), Some(dq)) = (jac.as_mut(), dq) {
            let mut mean = vec![0.0; p];
            for a in 0..4 {
                if let Some(d) = &dq[j][a] {
                    let w = row[a].exp();
                    for (m, v) in mean.iter_mut().zip(d) {
                        *m += w * v;
                    }
                }
            }
            for a in 0..4 {
                if q[a].is_finite() {
                    let d = dq[j][a].as_deref();
                    for i in 0..p {
                        jac[[j, a, i]] = d.map_or(0.0, |d| d[i]) - mean[i];
                    }
                }
            }
        }
    }
    Ok(ContextPolicy { log_probs: lp, jacobian: jac.map(|values| Jacobian { params: (0..p).collect(), values }) })
}

/// Truncated-search agent with learnable exit rewards.
pub struct MazeRuntimeFamily {
    ctx: MazeContexts,
    grid: BudgetGrid,
    layers: Vec<TbfsLayers>,
}

impl MazeRuntimeFamily {
    pub fn new(mazes: &[Maze], trajectories: &[Trajectory], grid: &BudgetGrid, exec: Execution) -> Result<Self> {
        let ctx = MazeContexts::build(mazes, trajectories)?;
        let layers = map_slice(exec, &ctx.keys, |&(m, c)| {
            let maze = &ctx.mazes[m];
            TbfsLayers::build(maze, maze.cell(c), grid.max())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { ctx, grid: grid.clone(), layers })
    }
}

impl PolicyFamily for MazeRuntimeFamily {
    type Prepared = Vec<ValueTable>;

    fn num_theta(&self) -> usize {
        self.ctx.num_exits
    }

    fn num_budgets(&self) -> usize {
        self.grid.len()
    }

    fn observations(&self) -> &[Vec<Observation>] {
        &self.ctx.observations
    }

    fn prepare(&self, theta: &[f64], want_grad: bool, exec: Execution) -> Result<Vec<ValueTable>> {
        let rewards = MazeRewards::new(theta.to_vec());
        map_slice(exec, &self.ctx.mazes, |m| ValueTable::new(m, &rewards, want_grad)).into_iter().collect()
    }

    fn evaluate(&self, tables: &Vec<ValueTable>, context: usize, want_grad: bool) -> Result<ContextPolicy> {
        let table = &tables[self.ctx.keys[context].0];
        let rows = self.layers[context].score(&table.values, &self.grid);
        let qs: Vec<[f64; 4]> = rows.iter().map(|r| r.map(|(q, _)| q)).collect();
        let dq: Option<Vec<[Option<Vec<f64>>; 4]>> = if want_grad {
            let grads = table.grads.as_ref().ok_or_else(|| Error::Contract("value table without gradients".into()))?;
            Some(rows.iter().map(|r| r.map(|(_, cell)| cell.map(|c| grads[c].clone()))).collect())
        } else {
            None
        };
        softmax_rows(&qs, dq.as_deref(), self.ctx.num_exits)
    }
}

/// Boltzmann baseline: `Q = β_temp · (best exit reward behind the action)`
/// over a grid of inverse temperatures.
pub struct MazeBoltzmannFamily {
    ctx: MazeContexts,
    betas: Vec<f64>,
    exits: Vec<BoltzmannExits>,
}

impl MazeBoltzmannFamily {
    pub fn new(mazes: &[Maze], trajectories: &[Trajectory], betas: &[f64], exec: Execution) -> Result<Self> {
        Self::with_reach(mazes, trajectories, betas, ExitReach::Subtree, exec)
    }

    pub fn with_reach(
        mazes: &[Maze],
        trajectories: &[Trajectory],
        betas: &[f64],
        reach: ExitReach,
        exec: Execution,
    ) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::Parameter(format!("temperature grid must be finite and >= 0, got {betas:?}")));
        }
        let ctx = MazeContexts::build(mazes, trajectories)?;
        let exits = map_slice(exec, &ctx.keys, |&(m, c)| {
            let maze = &ctx.mazes[m];
            reachable_exits_with(maze, maze.cell(c), reach)
        });
        Ok(Self { ctx, betas: betas.to_vec(), exits })
    }
}

impl PolicyFamily for MazeBoltzmannFamily {
    /// Effective rewards and their derivatives.
    type Prepared = (Vec<f64>, Vec<f64>);

    fn num_theta(&self) -> usize {
        self.ctx.num_exits
    }

    fn num_budgets(&self) -> usize {
        self.betas.len()
    }

    fn observations(&self) -> &[Vec<Observation>] {
        &self.ctx.observations
    }

    fn prepare(&self, theta: &[f64], _: bool, _: Execution) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(x) = theta.iter().find(|x| !x.is_finite()) {
            return Err(Error::Parameter(format!("non-finite reward parameter {x}")));
        }
        Ok((theta.iter().map(|&x| softplus(x)).collect(), theta.iter().map(|&x| sigmoid(x)).collect()))
    }

    fn evaluate(&self, prep: &(Vec<f64>, Vec<f64>), context: usize, want_grad: bool) -> Result<ContextPolicy> {
        let (eff, slope) = prep;
        let p = self.ctx.num_exits;
        let best = best_exit(&self.exits[context], eff);
        let qs: Vec<[f64; 4]> =
            self.betas.iter().map(|&b| best.map(|x| x.map_or(f64::NEG_INFINITY, |(r, _)| b * r))).collect();
        let dq: Option<Vec<[Option<Vec<f64>>; 4]>> = want_grad.then(|| {
            self.betas
                .iter()
                .map(|&b| {
                    best.map(|x| {
                        x.map(|(_, e)| {
                            let mut d = vec![0.0; p];
                            if let Some(e) = e {
                                d[e] = b * slope[e];
                            }
                            d
                        })
                    })
                })
                .collect()
        });
        softmax_rows(&qs, dq.as_deref(), p)
    }
}
