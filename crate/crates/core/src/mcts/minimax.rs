use std::collections::HashMap;
use std::sync::OnceLock;

use super::game::Board;

/// Exact game values of every position reachable from the empty board,
/// from the perspective of the player to move.
#[derive(Clone, Debug)]
pub struct MinimaxOracle {
    values: HashMap<Board, i8>,
}

impl MinimaxOracle {
    pub fn build() -> Self {
        let mut values = HashMap::new();
        negamax(Board::empty(), &mut values);
        Self { values }
    }

    /// Process-wide oracle, built on first use.
    pub fn shared() -> &'static Self {
        static ORACLE: OnceLock<MinimaxOracle> = OnceLock::new();
        ORACLE.get_or_init(Self::build)
    }

    pub fn num_positions(&self) -> usize {
        self.values.len()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Board> {
        self.values.keys()
    }

    pub fn value(&self, board: &Board) -> i8 {
        match self.values.get(board) {
            Some(&v) => v,
            // valid but unreachable-from-empty boards do not occur in play;
            // solve them on the fly
            None => negamax(*board, &mut HashMap::new()),
        }
    }

    /// Value and the set of actions attaining it.
    pub fn solve(&self, board: &Board) -> (i8, Vec<usize>) {
        let v = self.value(board);
        let best =
            board.legal_actions().into_iter().filter(|&a| -self.value(&board.play(a).expect("legal")) == v).collect();
        (v, best)
    }
}

fn negamax(board: Board, memo: &mut HashMap<Board, i8>) -> i8 {
    if let Some(&v) = memo.get(&board) {
        return v;
    }
    let v = match board.terminal_value() {
        Some(t) => t as i8,
        None => board
            .legal_actions()
            .into_iter()
            .map(|a| -negamax(board.play(a).expect("legal"), memo))
            .max()
            .expect("non-terminal board has a move"),
    };
    memo.insert(board, v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        let o = MinimaxOracle::shared();
        assert_eq!(o.num_positions(), 5478);
        assert_eq!(o.value(&Board::empty()), 0);
        let b: Board = "XX.OO....".parse().unwrap();
        let (v, best) = o.solve(&b);
        assert_eq!(v, 1);
        assert!(best.contains(&2));
    }

    #[test]
    fn every_position_is_consistent() {
        let o = MinimaxOracle::shared();
        for b in o.positions() {
            let v = o.value(b);
            match b.terminal_value() {
                Some(t) => assert_eq!(v as f64, t),
                None => {
                    let m = b.legal_actions().iter().map(|&a| -o.value(&b.play(a).unwrap())).max().unwrap();
                    assert_eq!(v, m, "{b}");
                }
            }
        }
    }
}
