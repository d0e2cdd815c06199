//! Grid mazes with rewarded exits, the attention-style heuristic value, the
//! truncated breadth-first-search agent and its Boltzmann baseline.

mod boltzmann;
mod heuristic;
mod rollout;
mod tbfs;

pub(crate) use boltzmann::best_exit;
pub use boltzmann::{
    boltzmann_log_policy, boltzmann_q, boltzmann_q_with, reachable_exits, reachable_exits_with, BoltzmannExits,
    ExitReach,
};
pub use heuristic::{heuristic_value, heuristic_value_and_grad, sigmoid, softplus, MazeRewards, ValueTable};
pub use rollout::{
    generate_maze_dataset, rollout, rollout_with_table, MazeDataConfig, MazeDataset, MazePolicyTable, Step, Trajectory,
};
pub use tbfs::{maze_log_policy, maze_policy, tbfs_q, FrontierState, MazeAgent, TbfsLayers};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid coordinate; `y = 0` is the top row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl From<[usize; 2]> for Cell {
    fn from([x, y]: [usize; 2]) -> Self {
        Cell { x, y }
    }
}

impl From<Cell> for [usize; 2] {
    fn from(c: Cell) -> Self {
        [c.x, c.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::North, Action::East, Action::South, Action::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    /// Wall bit for this side of a cell.
    pub fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn opposite(self) -> Action {
        Self::ALL[(self.index() + 2) % 4]
    }
}

/// Rectangular maze. `walls[y * width + x]` holds one bit per side
/// (N=1, E=2, S=4, W=8); a set bit is a wall.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMaze", into = "RawMaze")]
pub struct Maze {
    width: usize,
    height: usize,
    walls: Vec<u8>,
    exits: Vec<Cell>,
}

#[derive(Serialize, Deserialize)]
struct RawMaze {
    width: usize,
    height: usize,
    walls: Vec<u8>,
    exits: Vec<Cell>,
}

impl TryFrom<RawMaze> for Maze {
    type Error = Error;
    fn try_from(raw: RawMaze) -> Result<Self> {
        Maze::new(raw.width, raw.height, raw.walls, raw.exits)
    }
}

impl From<Maze> for RawMaze {
    fn from(m: Maze) -> Self {
        RawMaze { width: m.width, height: m.height, walls: m.walls, exits: m.exits }
    }
}

impl Maze {
    /// Validating constructor.
    pub fn new(width: usize, height: usize, walls: Vec<u8>, exits: Vec<Cell>) -> Result<Self> {
        let maze = Self { width, height, walls, exits };
        maze.validate()?;
        Ok(maze)
    }

    /// A maze with no interior walls, only the outer boundary.
    pub fn open(width: usize, height: usize, exits: Vec<Cell>) -> Result<Self> {
        let mut walls = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                let w = &mut walls[y * width + x];
                if y == 0 {
                    *w |= Action::North.bit();
                }
                if x + 1 == width {
                    *w |= Action::East.bit();
                }
                if y + 1 == height {
                    *w |= Action::South.bit();
                }
                if x == 0 {
                    *w |= Action::West.bit();
                }
            }
        }
        Self::new(width, height, walls, exits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn exits(&self) -> &[Cell] {
        &self.exits
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn walls(&self) -> &[u8] {
        &self.walls
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell { x: index % self.width, y: index / self.width }
    }

    pub fn contains(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn is_boundary(&self, c: Cell) -> bool {
        c.x == 0 || c.y == 0 || c.x + 1 == self.width || c.y + 1 == self.height
    }

    pub fn exit_index(&self, c: Cell) -> Option<usize> {
        self.exits.iter().position(|&e| e == c)
    }

    pub fn is_exit(&self, c: Cell) -> bool {
        self.exit_index(c).is_some()
    }

    fn step_raw(&self, c: Cell, a: Action) -> Option<Cell> {
        match a {
            Action::North if c.y > 0 => Some(Cell::new(c.x, c.y - 1)),
            Action::East if c.x + 1 < self.width => Some(Cell::new(c.x + 1, c.y)),
            Action::South if c.y + 1 < self.height => Some(Cell::new(c.x, c.y + 1)),
            Action::West if c.x > 0 => Some(Cell::new(c.x - 1, c.y)),
            _ => None,
        }
    }

    /// Cell reached by `a` from `c`, if no wall is in the way.
    pub fn neighbor(&self, c: Cell, a: Action) -> Option<Cell> {
        if self.walls[self.index(c)] & a.bit() != 0 {
            return None;
        }
        self.step_raw(c, a)
    }

    pub fn legal_actions(&self, c: Cell) -> Vec<Action> {
        Action::ALL.into_iter().filter(|&a| self.neighbor(c, a).is_some()).collect()
    }

    /// Cells reachable from `start` (walls respected, exits not absorbing).
    pub fn flood_fill(&self, start: Cell) -> Vec<bool> {
        let mut seen = vec![false; self.num_cells()];
        let mut stack = vec![start];
        seen[self.index(start)] = true;
        while let Some(c) = stack.pop() {
            for a in Action::ALL {
                if let Some(n) = self.neighbor(c, a) {
                    let i = self.index(n);
                    if !seen[i] {
                        seen[i] = true;
                        stack.push(n);
                    }
                }
            }
        }
        seen
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("maze dimensions must be positive".into());
        }
        if self.walls.len() != self.width * self.height {
            return bad(format!("expected {} wall masks, got {}", self.width * self.height, self.walls.len()));
        }
        for i in 0..self.num_cells() {
            let c = self.cell(i);
            if self.walls[i] & 0xF0 != 0 {
                return bad(format!("wall mask at {c:?} uses bits beyond NESW"));
            }
            for a in Action::ALL {
                let open = self.walls[i] & a.bit() == 0;
                match self.step_raw(c, a) {
                    None if open => return bad(format!("cell {c:?} is open to the outside ({a:?})")),
                    Some(n) => {
                        let back_open = self.walls[self.index(n)] & a.opposite().bit() == 0;
                        if open != back_open {
                            return bad(format!("asymmetric wall between {c:?} and {n:?}"));
                        }
                    }
                    None => {}
                }
            }
        }
        if self.exits.is_empty() {
            return bad("maze needs at least one exit".into());
        }
        for (i, &e) in self.exits.iter().enumerate() {
            if !self.contains(e) || !self.is_boundary(e) {
                return bad(format!("exit {e:?} is not a boundary cell"));
            }
            if self.exits[..i].contains(&e) {
                return bad(format!("duplicate exit {e:?}"));
            }
        }
        if self.flood_fill(Cell::new(0, 0)).iter().any(|&s| !s) {
            return bad("maze is not connected".into());
        }
        Ok(())
    }
}

/// Perfect maze from a seeded recursive backtracker, with `num_exits`
/// distinct boundary cells chosen as exits.
pub fn generate_maze(seed: u64, width: usize, height: usize, num_exits: usize) -> Result<Maze> {
    if width < 5 || height < 5 {
        return Err(Error::Config(format!("maze must be at least 5x5, got {width}x{height}")));
    }
    let boundary = 2 * (width + height) - 4;
    if num_exits == 0 || num_exits > boundary {
        return Err(Error::Config(format!(
            "num_exits must be in 1..={boundary} for a {width}x{height} maze, got {num_exits}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut walls = vec![0x0Fu8; width * height];
    let mut visited = vec![false; width * height];
    let start = rng.gen_range(0..width * height);
    visited[start] = true;
    let mut stack = vec![start];
    while let Some(&i) = stack.last() {
        let (x, y) = (i % width, i / width);
        let mut options = Vec::with_capacity(4);
        for a in Action::ALL {
            let n = match a {
                Action::North if y > 0 => Some(i - width),
                Action::East if x + 1 < width => Some(i + 1),
                Action::South if y + 1 < height => Some(i + width),
                Action::West if x > 0 => Some(i - 1),
                _ => None,
            };
            if let Some(n) = n.filter(|&n| !visited[n]) {
                options.push((a, n));
            }
        }
        match options.choose(&mut rng) {
            Some(&(a, n)) => {
                walls[i] &= !a.bit();
                walls[n] &= !a.opposite().bit();
                visited[n] = true;
                stack.push(n);
            }
            None => {
                stack.pop();
            }
        }
    }
    let mut border: Vec<Cell> = (0..width * height)
        .map(|i| Cell::new(i % width, i / width))
        .filter(|c| c.x == 0 || c.y == 0 || c.x + 1 == width || c.y + 1 == height)
        .collect();
    border.shuffle(&mut rng);
    border.truncate(num_exits);
    Maze::new(width, height, walls, border)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_maze(42, 9, 7, 5).unwrap();
        let b = generate_maze(42, 9, 7, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_maze(43, 9, 7, 5).unwrap());
    }

    #[test]
    fn small_maze_postconditions() {
        let m = generate_maze(1, 5, 5, 2).unwrap();
        assert_eq!(m.num_exits(), 2);
        assert!(m.exits().iter().all(|&e| m.is_boundary(e)));
        assert!(m.flood_fill(m.exits()[0]).iter().all(|&s| s));
    }

    #[test]
    fn infeasible_parameters_rejected() {
        assert!(matches!(generate_maze(0, 4, 9, 1), Err(Error::Config(_))));
        assert!(matches!(generate_maze(0, 5, 5, 17), Err(Error::Config(_))));
        assert!(matches!(generate_maze(0, 5, 5, 0), Err(Error::Config(_))));
        assert!(generate_maze(0, 5, 5, 16).is_ok());
    }

    #[test]
    fn perfect_maze_has_tree_edge_count() {
        let m = generate_maze(3, 12, 8, 3).unwrap();
        let open_sides: usize = (0..m.num_cells()).map(|i| m.legal_actions(m.cell(i)).len()).sum();
        assert_eq!(open_sides / 2, m.num_cells() - 1);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = generate_maze(5, 6, 6, 3).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: Maze = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
        let mut raw: serde_json::Value = serde_json::from_str(&s).unwrap();
        raw["walls"][0] = serde_json::json!(0);
        assert!(serde_json::from_value::<Maze>(raw).is_err());
        let interior =
            r#"{"width":5,"height":5,"walls":[9,1,1,1,3,8,0,0,0,2,8,0,0,0,2,8,0,0,0,2,12,4,4,4,6],"exits":[[2,2]]}"#;
        assert!(serde_json::from_str::<Maze>(interior).is_err());
    }

    #[test]
    fn connectivity_over_one_hundred_seeds() {
        for seed in 0..100 {
            let m = generate_maze(seed, 10, 10, 5).unwrap();
            let reach = m.flood_fill(Cell::new(0, 0));
            assert!(reach.iter().all(|&r| r), "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn generated_mazes_satisfy_invariants(seed in any::<u64>(), w in 5usize..14, h in 5usize..14, k in 1usize..6) {
            let m = generate_maze(seed, w, h, k).unwrap();
            prop_assert!(m.validate().is_ok());
            prop_assert_eq!(m.num_exits(), k);
        }
    }
}
