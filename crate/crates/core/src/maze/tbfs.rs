//! Truncated breadth-first search. Each initial action owns a frontier and a
//! visited set; one step pushes every frontier one level deeper and folds
//! the heuristic value of newly reached cells into that action's running
//! best. The start cell counts as explored for every action and exits are
//! absorbing, so the search never re-enters the start or continues past an
//! exit.

use super::{Action, Cell, Maze, MazeRewards, ValueTable};
use crate::anytime::{log_softmax, AnytimeAgent, BudgetGrid};
use crate::error::{Error, Result};

/// Inference state of the truncated search.
#[derive(Clone, Debug)]
pub struct FrontierState {
    depth: u32,
    start: Cell,
    legal: [bool; 4],
    frontiers: [Vec<usize>; 4],
    visited: Vec<u8>,
    best: [f64; 4],
    best_cell: [Option<usize>; 4],
    expansions: u64,
}

impl FrontierState {
    pub fn new(maze: &Maze, start: Cell) -> Result<Self> {
        if !maze.contains(start) {
            return Err(Error::Environment(format!("{start:?} is outside the maze")));
        }
        let legal = Action::ALL.map(|a| maze.neighbor(start, a).is_some());
        if !legal.iter().any(|&l| l) {
            return Err(Error::Environment(format!("no legal action at {start:?}")));
        }
        let mut visited = vec![0u8; maze.num_cells()];
        visited[maze.index(start)] = 0x0F;
        Ok(Self {
            depth: 0,
            start,
            legal,
            frontiers: Default::default(),
            visited,
            best: [f64::NEG_INFINITY; 4],
            best_cell: [None; 4],
            expansions: 0,
        })
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    pub fn legal(&self) -> [bool; 4] {
        self.legal
    }

    pub fn frontier(&self, action: Action) -> &[usize] {
        &self.frontiers[action.index()]
    }

    /// Running best value per initial action (`-inf` for walls).
    pub fn best_values(&self) -> [f64; 4] {
        self.best
    }

    /// Cell attaining the running best per action.
    pub fn best_cells(&self) -> [Option<usize>; 4] {
        self.best_cell
    }

    /// Advance one depth level and return the cells newly reached per action.
    pub fn step(&mut self, maze: &Maze, values: &[f64]) -> [Vec<usize>; 4] {
        let mut fresh: [Vec<usize>; 4] = Default::default();
        for a in Action::ALL {
            let ai = a.index();
            if !self.legal[ai] {
                continue;
            }
            let bit = a.bit();
            let mut next = Vec::new();
            if self.depth == 0 {
                let n = maze.neighbor(self.start, a).expect("legal action");
                let ni = maze.index(n);
                self.visited[ni] |= bit;
                next.push(ni);
            } else {
                for &ci in &self.frontiers[ai] {
                    let c = maze.cell(ci);
                    if maze.is_exit(c) {
                        continue;
                    }
                    for b in Action::ALL {
                        if let Some(n) = maze.neighbor(c, b) {
                            let ni = maze.index(n);
                            if self.visited[ni] & bit == 0 {
                                self.visited[ni] |= bit;
                                next.push(ni);
                            }
                        }
                    }
                }
            }
            for &ni in &next {
                if values[ni] > self.best[ai] {
                    self.best[ai] = values[ni];
                    self.best_cell[ai] = Some(ni);
                }
            }
            self.expansions += next.len() as u64;
            fresh[ai] = next.clone();
            self.frontiers[ai] = next;
        }
        self.depth += 1;
        fresh
    }
}

/// Softmax over legal actions: `π(a) ∝ exp(Q(a))`, with `-inf` marking
/// excluded actions.
pub fn maze_policy(q: &[f64]) -> Result<Vec<f64>> {
    Ok(maze_log_policy(q)?.into_iter().map(f64::exp).collect())
}

pub fn maze_log_policy(q: &[f64]) -> Result<Vec<f64>> {
    if !q.iter().any(|x| x.is_finite()) {
        return Err(Error::Environment("no action has a finite Q value".into()));
    }
    if q.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::Environment(format!("invalid Q vector {q:?}")));
    }
    Ok(log_softmax(q))
}

/// Zero-budget Q: constant over legal actions (uniform policy).
pub(crate) fn zero_budget_q(legal: [bool; 4]) -> [f64; 4] {
    legal.map(|l| if l { 0.0 } else { f64::NEG_INFINITY })
}

/// Q values of the search truncated at `budget` steps: the best heuristic
/// value reachable within `budget` moves that start with each action.
pub fn tbfs_q(s: Cell, budget: u32, maze: &Maze, rewards: &MazeRewards) -> Result<Vec<f64>> {
    if budget == 0 {
        return Err(Error::Parameter("tbfs_q needs budget >= 1".into()));
    }
    let table = ValueTable::new(maze, rewards, false)?;
    let mut f = FrontierState::new(maze, s)?;
    for _ in 0..budget {
        f.step(maze, &table.values);
    }
    Ok(f.best_values().to_vec())
}

/// The truncated search as an anytime agent over maze cells.
pub struct MazeAgent<'a> {
    maze: &'a Maze,
    values: Vec<f64>,
}

impl<'a> MazeAgent<'a> {
    pub fn new(maze: &'a Maze, rewards: &MazeRewards) -> Result<Self> {
        Ok(Self { maze, values: ValueTable::new(maze, rewards, false)?.values })
    }
}

impl AnytimeAgent for MazeAgent<'_> {
    type State = Cell;
    type Inference = FrontierState;

    fn num_actions(&self, _: &Cell) -> usize {
        4
    }

    fn start(&self, state: &Cell) -> Result<FrontierState> {
        FrontierState::new(self.maze, *state)
    }

    fn advance(&self, _: &Cell, inference: &mut FrontierState) {
        inference.step(self.maze, &self.values);
    }

    fn steps(&self, inference: &FrontierState) -> u32 {
        inference.depth()
    }

    fn work(&self, inference: &FrontierState) -> u64 {
        inference.expansions()
    }

    fn extract(&self, _: &Cell, inference: &FrontierState) -> Result<Vec<f64>> {
        if inference.depth() == 0 {
            maze_log_policy(&zero_budget_q(inference.legal()))
        } else {
            maze_log_policy(&inference.best_values())
        }
    }
}

/// The parameter-independent part of a truncated search from one cell: the
/// cells first reached at each depth, per initial action. Re-scoring these
/// layers under new rewards reproduces [`FrontierState`] exactly, without
/// re-running the search.
#[derive(Clone, Debug)]
pub struct TbfsLayers {
    legal: [bool; 4],
    layers: [Vec<Vec<usize>>; 4],
}

/// Per-action best value and the cell attaining it, at one budget.
pub type ScoredRow = [(f64, Option<usize>); 4];

impl TbfsLayers {
    pub fn build(maze: &Maze, start: Cell, max_depth: u32) -> Result<Self> {
        let mut f = FrontierState::new(maze, start)?;
        let zeros = vec![0.0; maze.num_cells()];
        let mut layers: [Vec<Vec<usize>>; 4] = Default::default();
        for _ in 0..max_depth {
            let fresh = f.step(maze, &zeros);
            for (layer, cells) in layers.iter_mut().zip(fresh) {
                layer.push(cells);
            }
        }
        Ok(Self { legal: f.legal(), layers })
    }

    pub fn legal(&self) -> [bool; 4] {
        self.legal
    }

    pub fn max_depth(&self) -> u32 {
        self.layers[0].len() as u32
    }

    /// Best value and argmax cell per action at every grid budget. Budget 0
    /// rows carry `(0.0, None)` for legal actions.
    pub fn score(&self, values: &[f64], grid: &BudgetGrid) -> Vec<ScoredRow> {
        let mut best = [(f64::NEG_INFINITY, None::<usize>); 4];
        let mut depth = 0u32;
        let mut rows = Vec::with_capacity(grid.len());
        for &budget in grid.values() {
            while depth < budget {
                for (ai, b) in best.iter_mut().enumerate() {
                    for &ci in &self.layers[ai][depth as usize] {
                        if values[ci] > b.0 {
                            *b = (values[ci], Some(ci));
                        }
                    }
                }
                depth += 1;
            }
            if budget == 0 {
                let q = zero_budget_q(self.legal);
                rows.push([0, 1, 2, 3].map(|a| (q[a], None)));
            } else {
                rows.push(best);
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anytime::{run_fixed_budget, sweep_policies};
    use crate::maze::generate_maze;
    use approx::assert_relative_eq;
    use std::collections::HashSet;

    /// Best heuristic value over every cell visited by any move sequence of
    /// length <= depth that starts with `first`, never re-enters `s`, and
    /// stops at exits. Other cells may be revisited freely.
    fn brute_force_q(maze: &Maze, values: &[f64], s: Cell, first: Action, depth: u32) -> f64 {
        fn walk(maze: &Maze, values: &[f64], s: Cell, c: Cell, left: u32) -> f64 {
            let mut best = values[maze.index(c)];
            if left == 0 || maze.is_exit(c) {
                return best;
            }
            for a in Action::ALL {
                if let Some(n) = maze.neighbor(c, a).filter(|&n| n != s) {
                    best = best.max(walk(maze, values, s, n, left - 1));
                }
            }
            best
        }
        match maze.neighbor(s, first) {
            None => f64::NEG_INFINITY,
            Some(n) => walk(maze, values, s, n, depth - 1),
        }
    }

    fn rewards5() -> MazeRewards {
        MazeRewards::new(vec![0.4, -0.3, 1.2, 0.1, 2.0])
    }

    #[test]
    fn budget_one_scores_adjacent_cells() {
        let maze = generate_maze(11, 7, 7, 5).unwrap();
        let r = rewards5();
        let s = Cell::new(3, 3);
        let q = tbfs_q(s, 1, &maze, &r).unwrap();
        for a in Action::ALL {
            match maze.neighbor(s, a) {
                Some(n) => assert_eq!(q[a.index()], super::super::heuristic_value(n, &maze, &r)),
                None => assert_eq!(q[a.index()], f64::NEG_INFINITY),
            }
        }
    }

    #[test]
    fn matches_brute_force_on_small_mazes() {
        for seed in 0..8 {
            let maze = generate_maze(seed, 5, 5, 3).unwrap();
            let r = MazeRewards::new(vec![0.5, 1.5, -0.2]);
            let values = ValueTable::new(&maze, &r, false).unwrap().values;
            for i in 0..maze.num_cells() {
                let s = maze.cell(i);
                for budget in 1..=3 {
                    let q = tbfs_q(s, budget, &maze, &r).unwrap();
                    for a in Action::ALL {
                        assert_eq!(q[a.index()], brute_force_q(&maze, &values, s, a, budget));
                    }
                }
            }
        }
    }

    #[test]
    fn full_depth_equals_reachable_max() {
        let maze = generate_maze(4, 6, 6, 4).unwrap();
        let r = MazeRewards::new(vec![0.5, 1.5, -0.2, 0.9]);
        let values = ValueTable::new(&maze, &r, false).unwrap().values;
        let s = Cell::new(2, 3);
        let deep = tbfs_q(s, 36, &maze, &r).unwrap();
        for a in maze.legal_actions(s) {
            // BFS over the graph where exits do not expand
            let start = maze.neighbor(s, a).unwrap();
            let mut seen = HashSet::from([s, start]);
            let mut stack = vec![start];
            while let Some(c) = stack.pop() {
                if maze.is_exit(c) {
                    continue;
                }
                for b in Action::ALL {
                    if let Some(n) = maze.neighbor(c, b) {
                        if seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
            seen.remove(&s);
            let best = seen.iter().map(|&c| values[maze.index(c)]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(deep[a.index()], best);
        }
    }

    #[test]
    fn dead_end_frontier_empties() {
        // corridor along the top row: (0,0)-(1,0)-(2,0)-(3,0)-(4,0) with the rest walled off
        let mut maze = Maze::open(5, 5, vec![Cell::new(0, 4)]).unwrap();
        let mut walls = maze.walls().to_vec();
        for x in 0..5 {
            walls[x] |= Action::South.bit();
            walls[5 + x] |= Action::North.bit();
        }
        walls[0] &= !Action::South.bit();
        walls[5] &= !Action::North.bit();
        maze = Maze::new(5, 5, walls, vec![Cell::new(0, 4)]).unwrap();
        let values = vec![1.0; 25];
        let mut f = FrontierState::new(&maze, Cell::new(3, 0)).unwrap();
        for _ in 0..3 {
            f.step(&maze, &values);
        }
        assert!(f.frontier(Action::East).is_empty());
        let frozen = f.best_values()[Action::East.index()];
        f.step(&maze, &values);
        assert_eq!(f.best_values()[Action::East.index()], frozen);
    }

    #[test]
    fn first_step_frontier_is_the_neighbor() {
        let maze = Maze::open(7, 7, vec![Cell::new(0, 0)]).unwrap();
        let mut f = FrontierState::new(&maze, Cell::new(3, 3)).unwrap();
        f.step(&maze, &vec![0.0; 49]);
        for a in Action::ALL {
            let n = maze.neighbor(Cell::new(3, 3), a).unwrap();
            assert_eq!(f.frontier(a), &[maze.index(n)]);
        }
    }

    #[test]
    fn open_region_frontier_sizes_match_path_enumeration() {
        // 11x11 open room, start in the middle, k <= 3 keeps every path inside
        let maze = Maze::open(11, 11, vec![Cell::new(0, 0)]).unwrap();
        let s = Cell::new(5, 5);
        let mut f = FrontierState::new(&maze, s).unwrap();
        let zeros = vec![0.0; maze.num_cells()];
        let m = &maze;
        for k in 1..=4u32 {
            f.step(&maze, &zeros);
            for a in Action::ALL {
                // endpoints of length-k paths starting with a that avoid s,
                // minus endpoints of shorter ones
                let mut by_len: Vec<HashSet<Cell>> = vec![HashSet::from([maze.neighbor(s, a).unwrap()])];
                for _ in 1..k {
                    let last = by_len.last().unwrap();
                    let next = last
                        .iter()
                        .flat_map(|&c| Action::ALL.into_iter().filter_map(move |b| m.neighbor(c, b)))
                        .filter(|&n| n != s)
                        .collect();
                    by_len.push(next);
                }
                let earlier: HashSet<Cell> = by_len[..by_len.len() - 1].iter().flatten().copied().collect();
                let exact = by_len.last().unwrap().difference(&earlier).count();
                assert_eq!(f.frontier(a).len(), exact, "k={k} a={a:?}");
            }
        }
    }

    #[test]
    fn best_values_are_monotone_in_depth() {
        let maze = generate_maze(9, 9, 9, 5).unwrap();
        let values = ValueTable::new(&maze, &rewards5(), false).unwrap().values;
        let mut f = FrontierState::new(&maze, Cell::new(4, 4)).unwrap();
        let mut prev = [f64::NEG_INFINITY; 4];
        for _ in 0..30 {
            f.step(&maze, &values);
            let cur = f.best_values();
            for a in 0..4 {
                assert!(cur[a] >= prev[a]);
            }
            prev = cur;
        }
    }

    #[test]
    fn policy_examples() {
        let p = maze_policy(&[1.0; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = maze_policy(&[0.0, 2f64.ln(), f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p[1], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(p[2], 0.0);
        let q = [0.3, -1.0, 2.5, f64::NEG_INFINITY];
        let shifted = q.map(|x| x + 17.0);
        let (a, b) = (maze_policy(&q).unwrap(), maze_policy(&shifted).unwrap());
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
        assert!(matches!(maze_policy(&[f64::NEG_INFINITY; 4]), Err(Error::Environment(_))));
    }

    #[test]
    fn sweep_rows_match_fixed_budget_runs_and_cost() {
        let maze = generate_maze(21, 12, 12, 5).unwrap();
        let r = rewards5();
        let agent = MazeAgent::new(&maze, &r).unwrap();
        let grid = BudgetGrid::new(vec![1, 2, 5, 10, 20]).unwrap();
        let s = Cell::new(6, 5);
        let sweep = sweep_policies(&agent, &s, &grid).unwrap();
        for (k, &b) in grid.values().iter().enumerate() {
            let (row, _) = run_fixed_budget(&agent, &s, b).unwrap();
            assert_eq!(sweep.policy.row(k), row);
        }
        let (_, work) = run_fixed_budget(&agent, &s, grid.max()).unwrap();
        assert_eq!(sweep.work, work);
    }

    #[test]
    fn zero_grid_gives_uniform_row() {
        let maze = generate_maze(2, 6, 6, 2).unwrap();
        let r = MazeRewards::new(vec![0.0, 1.0]);
        let agent = MazeAgent::new(&maze, &r).unwrap();
        let s = Cell::new(2, 2);
        let sweep = sweep_policies(&agent, &s, &BudgetGrid::new(vec![0]).unwrap()).unwrap();
        let n = maze.legal_actions(s).len() as f64;
        for a in maze.legal_actions(s) {
            assert_relative_eq!(sweep.policy.log_probs[[0, a.index()]], -n.ln(), epsilon = 1e-15);
        }
        assert_eq!(sweep.work, 0);
    }

    #[test]
    fn layers_reproduce_frontier_state() {
        let maze = generate_maze(33, 10, 10, 5).unwrap();
        let r = rewards5();
        let values = ValueTable::new(&maze, &r, false).unwrap().values;
        let grid = BudgetGrid::maze_default();
        for i in [0, 17, 45, 99] {
            let s = maze.cell(i);
            let layers = TbfsLayers::build(&maze, s, grid.max()).unwrap();
            let rows = layers.score(&values, &grid);
            let mut f = FrontierState::new(&maze, s).unwrap();
            for (k, &b) in grid.values().iter().enumerate() {
                while f.depth() < b {
                    f.step(&maze, &values);
                }
                if b > 0 {
                    assert_eq!(rows[k].map(|x| x.0), f.best_values());
                    assert_eq!(rows[k].map(|x| x.1), f.best_cells());
                }
            }
        }
    }
}
