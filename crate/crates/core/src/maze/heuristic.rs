use serde::{Deserialize, Serialize};

use super::{Cell, Maze};
use crate::anytime::log_softmax;
use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Unconstrained exit-reward parameters; the effective reward of exit `i`
/// is `softplus(raw[i])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MazeRewards {
    pub raw: Vec<f64>,
}

impl MazeRewards {
    pub fn new(raw: Vec<f64>) -> Self {
        Self { raw }
    }

    /// Parameters whose effective rewards equal `rewards` (all must be > 0).
    pub fn from_effective(rewards: &[f64]) -> Result<Self> {
        if let Some(r) = rewards.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::Parameter(format!("effective reward must be positive, got {r}")));
        }
        // inverse softplus: ln(e^r - 1) = r + ln(1 - e^-r)
        Ok(Self { raw: rewards.iter().map(|&r| r + (-(-r).exp()).ln_1p()).collect() })
    }

    pub fn effective(&self) -> Vec<f64> {
        self.raw.iter().map(|&x| softplus(x)).collect()
    }
}

/// Attention-weighted exit value of a cell: exits are weighted by
/// `exp(-d_i R_i)` with `d_i` the Manhattan distance (walls ignored).
pub fn heuristic_value(cell: Cell, maze: &Maze, rewards: &MazeRewards) -> f64 {
    value_with_effective(cell, maze, &rewards.effective())
}

fn value_with_effective(cell: Cell, maze: &Maze, eff: &[f64]) -> f64 {
    let logw: Vec<f64> = maze.exits().iter().zip(eff).map(|(&e, &r)| -(cell.manhattan(e) as f64) * r).collect();
    log_softmax(&logw).iter().zip(eff).map(|(lp, r)| lp.exp() * r).sum()
}

/// Value and its gradient with respect to the raw reward parameters.
///
/// With `p_j` the attention weights, `dV/dR_j = p_j (1 - d_j (R_j - V))`.
pub fn heuristic_value_and_grad(cell: Cell, maze: &Maze, rewards: &MazeRewards) -> (f64, Vec<f64>) {
    let eff = rewards.effective();
    let dists: Vec<f64> = maze.exits().iter().map(|&e| cell.manhattan(e) as f64).collect();
    let logw: Vec<f64> = dists.iter().zip(&eff).map(|(d, r)| -d * r).collect();
    let p: Vec<f64> = log_softmax(&logw).into_iter().map(f64::exp).collect();
    let v: f64 = p.iter().zip(&eff).map(|(p, r)| p * r).sum();
    let grad = (0..eff.len()).map(|j| p[j] * (1.0 - dists[j] * (eff[j] - v)) * sigmoid(rewards.raw[j])).collect();
    (v, grad)
}

/// Heuristic values (and optionally gradients) for every cell of a maze.
#[derive(Clone, Debug)]
pub struct ValueTable {
    pub values: Vec<f64>,
    pub grads: Option<Vec<Vec<f64>>>,
}

impl ValueTable {
    pub fn new(maze: &Maze, rewards: &MazeRewards, with_grad: bool) -> Result<Self> {
        if rewards.raw.len() != maze.num_exits() {
            return Err(Error::Contract(format!(
                "{} reward parameters for {} exits",
                rewards.raw.len(),
                maze.num_exits()
            )));
        }
        if let Some(x) = rewards.raw.iter().find(|x| !x.is_finite()) {
            return Err(Error::Parameter(format!("non-finite reward parameter {x}")));
        }
        let cells = (0..maze.num_cells()).map(|i| maze.cell(i));
        if with_grad {
            let (values, grads) = cells.map(|c| heuristic_value_and_grad(c, maze, rewards)).unzip();
            Ok(Self { values, grads: Some(grads) })
        } else {
            let eff = rewards.effective();
            Ok(Self { values: cells.map(|c| value_with_effective(c, maze, &eff)).collect(), grads: None })
        }
    }
}
