use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Player {
    X,
    O,
}

impl Player {
    pub fn other(self) -> Self {
        match self {
            Player::X => Player::O,
            Player::O => Player::X,
        }
    }

    fn mark(self) -> u8 {
        match self {
            Player::X => 1,
            Player::O => 2,
        }
    }
}

pub const LINES: [[usize; 3]; 8] =
    [[0, 1, 2], [3, 4, 5], [6, 7, 8], [0, 3, 6], [1, 4, 7], [2, 5, 8], [0, 4, 8], [2, 4, 6]];

/// Tic-tac-toe position. Cells are row-major, 0 = empty, 1 = X, 2 = O; the
/// player to move follows from the mark counts (X moves first).
///
/// Text form: nine characters from `X`, `O`, `.`, row-major.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Board {
    cells: [u8; 9],
}

impl Board {
    pub fn empty() -> Self {
        Self { cells: [0; 9] }
    }

    pub fn from_cells(cells: [u8; 9]) -> Result<Self> {
        if cells.iter().any(|&c| c > 2) {
            return Err(Error::Environment("cell marks must be 0, 1 or 2".into()));
        }
        let b = Self { cells };
        let (x, o) = b.counts();
        if !(x == o || x == o + 1) {
            return Err(Error::Environment(format!("{b}: mark counts X={x} O={o}")));
        }
        match (b.has_line(Player::X), b.has_line(Player::O)) {
            (true, true) => return Err(Error::Environment(format!("{b}: both players have a line"))),
            (true, false) if x != o + 1 => return Err(Error::Environment(format!("{b}: play continued after X won"))),
            (false, true) if x != o => return Err(Error::Environment(format!("{b}: play continued after O won"))),
            _ => {}
        }
        Ok(b)
    }

    pub fn cells(&self) -> &[u8; 9] {
        &self.cells
    }

    fn counts(&self) -> (usize, usize) {
        let x = self.cells.iter().filter(|&&c| c == 1).count();
        let o = self.cells.iter().filter(|&&c| c == 2).count();
        (x, o)
    }

    pub fn to_move(&self) -> Player {
        let (x, o) = self.counts();
        if x == o {
            Player::X
        } else {
            Player::O
        }
    }

    fn has_line(&self, p: Player) -> bool {
        let m = p.mark();
        LINES.iter().any(|l| l.iter().all(|&i| self.cells[i] == m))
    }

    pub fn winner(&self) -> Option<Player> {
        [Player::X, Player::O].into_iter().find(|&p| self.has_line(p))
    }

    pub fn is_terminal(&self) -> bool {
        self.winner().is_some() || self.cells.iter().all(|&c| c != 0)
    }

    /// Exact outcome from the perspective of the player to move, if terminal.
    pub fn terminal_value(&self) -> Option<f64> {
        match self.winner() {
            // the player who just moved made the line
            Some(_) => Some(-1.0),
            None if self.cells.iter().all(|&c| c != 0) => Some(0.0),
            None => None,
        }
    }

    /// Empty cells, or nothing once the game is over.
    pub fn legal_actions(&self) -> Vec<usize> {
        if self.is_terminal() {
            return Vec::new();
        }
        (0..9).filter(|&i| self.cells[i] == 0).collect()
    }

    pub fn play(&self, action: usize) -> Result<Self> {
        if action >= 9 || self.cells[action] != 0 || self.is_terminal() {
            return Err(Error::Environment(format!("illegal move {action} in {self}")));
        }
        let mut cells = self.cells;
        cells[action] = self.to_move().mark();
        Ok(Self { cells })
    }

    /// Base-3 code, unique per board.
    pub fn code(&self) -> u32 {
        self.cells.iter().rev().fold(0, |acc, &c| acc * 3 + c as u32)
    }
}

impl fmt::Display for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &c in &self.cells {
            f.write_str(match c {
                1 => "X",
                2 => "O",
                _ => ".",
            })?;
        }
        Ok(())
    }
}

impl fmt::Debug for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Board({self})")
    }
}

impl FromStr for Board {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 9 {
            return Err(Error::Environment(format!("board string must have 9 characters, got {s:?}")));
        }
        let mut cells = [0u8; 9];
        for (i, ch) in chars.into_iter().enumerate() {
            cells[i] = match ch {
                'X' | 'x' => 1,
                'O' | 'o' => 2,
                '.' => 0,
                _ => return Err(Error::Environment(format!("bad board character {ch:?} in {s:?}"))),
            };
        }
        Self::from_cells(cells)
    }
}

impl TryFrom<String> for Board {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Board> for String {
    fn from(b: Board) -> String {
        b.to_string()
    }
}

/// Open-line heuristic from the mover's perspective: lines free of the
/// opponent's marks minus lines free of the mover's marks, over 8.
/// Terminal positions get their exact value.
pub fn heuristic_value(board: &Board) -> f64 {
    if let Some(v) = board.terminal_value() {
        return v;
    }
    let me = board.to_move().mark();
    let them = board.to_move().other().mark();
    let open_for = |blocker: u8| LINES.iter().filter(|l| l.iter().all(|&i| board.cells[i] != blocker)).count();
    (open_for(them) as f64 - open_for(me) as f64) / 8.0
}
