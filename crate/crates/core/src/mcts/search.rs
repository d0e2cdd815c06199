use serde::{Deserialize, Serialize};

use super::game::{heuristic_value, Board};
use super::minimax::MinimaxOracle;
use crate::anytime::{clamp_log, softmax, AnytimeAgent, BudgetConditionedPolicy, BudgetGrid, SweepOutcome};
use crate::error::{Error, Result};

/// Leaf evaluator, always from the perspective of the player to move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueFunction {
    /// Open-line count heuristic.
    #[default]
    Heuristic,
    /// Exact game value.
    Minimax,
}

impl ValueFunction {
    pub fn evaluate(self, board: &Board) -> f64 {
        if let Some(v) = board.terminal_value() {
            return v;
        }
        match self {
            ValueFunction::Heuristic => heuristic_value(board),
            ValueFunction::Minimax => MinimaxOracle::shared().value(board) as f64,
        }
    }
}

/// Anchor policy over legal moves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PriorPolicy {
    #[default]
    Uniform,
    /// Softmax of the negated heuristic value of each child, scaled by
    /// `1 / temperature`.
    Heuristic { temperature: f64 },
}

impl PriorPolicy {
    /// Probabilities aligned with `board.legal_actions()`.
    pub fn probabilities(&self, board: &Board) -> Vec<f64> {
        let actions = board.legal_actions();
        match *self {
            PriorPolicy::Uniform => vec![1.0 / actions.len() as f64; actions.len()],
            PriorPolicy::Heuristic { temperature } => {
                let logits: Vec<f64> =
                    actions.iter().map(|&a| -heuristic_value(&board.play(a).expect("legal")) / temperature).collect();
                softmax(&logits)
            }
        }
    }
}

/// Per-action scale in the final policy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalForm {
    /// `β_puct·sqrt(B)/(N(a)+1)`.
    #[default]
    PerAction,
    /// `β_puct·sqrt(B)/(B+|A|)`, shared by all actions.
    Regularized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctsParams {
    pub beta_puct: f64,
    pub value: ValueFunction,
    pub prior: PriorPolicy,
    pub final_form: FinalForm,
}

impl Default for MctsParams {
    fn default() -> Self {
        Self {
            beta_puct: 1.0,
            value: ValueFunction::Heuristic,
            prior: PriorPolicy::Uniform,
            final_form: FinalForm::PerAction,
        }
    }
}

impl MctsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_puct.is_finite() && self.beta_puct > 0.0) {
            return Err(Error::Parameter(format!("beta_puct must be positive, got {}", self.beta_puct)));
        }
        if let PriorPolicy::Heuristic { temperature } = self.prior {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::Parameter(format!("prior temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

/// Per-action statistics of one tree node. Slot `i` refers to
/// `actions[i]`; values are from the perspective of the node's mover.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchNode {
    pub board: Board,
    pub actions: Vec<usize>,
    pub prior: Vec<f64>,
    pub visits: Vec<u32>,
    pub value_sum: Vec<f64>,
    pub children: Vec<Option<usize>>,
}

impl SearchNode {
    fn new(board: Board, prior: &PriorPolicy) -> Self {
        let actions = board.legal_actions();
        let n = actions.len();
        Self {
            board,
            prior: if n == 0 { Vec::new() } else { prior.probabilities(&board) },
            actions,
            visits: vec![0; n],
            value_sum: vec![0.0; n],
            children: vec![None; n],
        }
    }

    /// Detached node with the given statistics (the board is a placeholder).
    pub fn from_stats(prior: Vec<f64>, visits: Vec<u32>, q: Vec<f64>) -> Self {
        let n = prior.len();
        assert!(visits.len() == n && q.len() == n, "statistics must align");
        Self {
            board: Board::empty(),
            actions: (0..n).collect(),
            value_sum: q.iter().zip(&visits).map(|(q, &v)| q * v as f64).collect(),
            prior,
            visits,
            children: vec![None; n],
        }
    }

    /// Mean backed-up value; 0 for unvisited actions.
    pub fn q(&self, slot: usize) -> f64 {
        if self.visits[slot] == 0 {
            0.0
        } else {
            self.value_sum[slot] / self.visits[slot] as f64
        }
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().map(|&v| v as u64).sum()
    }
}

/// PUCT selection; ties go to the lowest slot.
pub fn puct_select(node: &SearchNode, beta_puct: f64) -> usize {
    let sqrt_total = (node.total_visits() as f64).sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..node.actions.len() {
        let score = node.q(i) + beta_puct * node.prior[i] * sqrt_total / (node.visits[i] as f64 + 1.0);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Path of one expansion and the leaf value, for audit.
#[derive(Clone, Debug, PartialEq)]
pub struct BackupTrace {
    /// `(node, slot)` pairs from the root down.
    pub path: Vec<(usize, usize)>,
    /// Leaf value from the leaf mover's perspective.
    pub leaf_value: f64,
}

/// Node arena grown one expansion at a time. Node 0 is the root.
#[derive(Clone, Debug)]
pub struct SearchTree {
    nodes: Vec<SearchNode>,
    expansions: u64,
}

impl SearchTree {
    pub fn new(board: Board, params: &MctsParams) -> Result<Self> {
        params.validate()?;
        if board.is_terminal() {
            return Err(Error::Environment(format!("search from terminal position {board}")));
        }
        Ok(Self { nodes: vec![SearchNode::new(board, &params.prior)], expansions: 0 })
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    pub fn node(&self, i: usize) -> &SearchNode {
        &self.nodes[i]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Value-function evaluations performed so far.
    pub fn expansions(&self) -> u64 {
        self.expansions
    }

    /// One descent, one leaf evaluation (exact at terminals), one backup.
    pub fn expand_once(&mut self, params: &MctsParams) -> BackupTrace {
        let mut path = Vec::new();
        let mut node = 0;
        let leaf_value = loop {
            let current = &self.nodes[node];
            if current.actions.is_empty() {
                break current.board.terminal_value().expect("node without moves is terminal");
            }
            let slot = puct_select(current, params.beta_puct);
            path.push((node, slot));
            match current.children[slot] {
                Some(child) => node = child,
                None => {
                    let board = current.board.play(current.actions[slot]).expect("legal");
                    let child = SearchNode::new(board, &params.prior);
                    let v = params.value.evaluate(&board);
                    self.nodes.push(child);
                    let id = self.nodes.len() - 1;
                    self.nodes[node].children[slot] = Some(id);
                    break v;
                }
            }
        };
        let mut v = leaf_value;
        for &(n, slot) in path.iter().rev() {
            // one ply up: the parent's mover sees the negated value
            v = -v;
            self.nodes[n].visits[slot] += 1;
            self.nodes[n].value_sum[slot] += v;
        }
        self.expansions += 1;
        BackupTrace { path, leaf_value }
    }
}

/// Root of `Σ_a c/(N(a)+1) · π⁰(a)/(γ − Q(a)) = 1` with
/// `c = β_puct·sqrt(budget)`, by bisection above `max Q`.
pub fn solve_gamma(node: &SearchNode, beta_puct: f64, budget: u64) -> Result<f64> {
    solve_gamma_with(node, beta_puct, budget, FinalForm::PerAction)
}

fn coefficients(node: &SearchNode, beta_puct: f64, budget: u64, form: FinalForm) -> Result<Vec<f64>> {
    let n = node.actions.len();
    if n == 0 {
        return Err(Error::Contract("solve_gamma on a node without actions".into()));
    }
    if budget == 0 {
        return Err(Error::Contract("solve_gamma needs a positive budget".into()));
    }
    if node.prior.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Contract("solve_gamma needs positive priors".into()));
    }
    let c = beta_puct * (budget as f64).sqrt();
    Ok((0..n)
        .map(|i| {
            let scale = match form {
                FinalForm::PerAction => node.visits[i] as f64 + 1.0,
                FinalForm::Regularized => (budget + n as u64) as f64,
            };
            c * node.prior[i] / scale
        })
        .collect())
}

pub fn solve_gamma_with(node: &SearchNode, beta_puct: f64, budget: u64, form: FinalForm) -> Result<f64> {
    let coef = coefficients(node, beta_puct, budget, form)?;
    let n = coef.len();
    let q: Vec<f64> = (0..n).map(|i| node.q(i)).collect();
    let residual = |g: f64| coef.iter().zip(&q).map(|(k, q)| k / (g - q)).sum::<f64>() - 1.0;
    let max_q = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_prior = node.prior.iter().copied().fold(0.0, f64::max);
    let mut lo = max_q + 1e-12;
    let mut hi = max_q + beta_puct * (budget as f64).sqrt() * max_prior * n as f64 + 1.0;
    // the sum is decreasing in γ: positive residual means γ is too small;
    // bisect until the bracket collapses and keep the closest point
    let mut best = (f64::INFINITY, hi);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let r = residual(mid);
        if r.abs() < best.0 {
            best = (r.abs(), mid);
        }
        if r == 0.0 {
            break;
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best.1)
}

/// Final action distribution over the node's slots after `budget`
/// expansions; the prior itself at budget 0.
pub fn final_policy(node: &SearchNode, beta_puct: f64, budget: u64) -> Result<Vec<f64>> {
    final_policy_with(node, beta_puct, budget, FinalForm::PerAction)
}

pub fn final_policy_with(node: &SearchNode, beta_puct: f64, budget: u64, form: FinalForm) -> Result<Vec<f64>> {
    if budget == 0 {
        return Ok(node.prior.clone());
    }
    let gamma = solve_gamma_with(node, beta_puct, budget, form)?;
    let raw: Vec<f64> = coefficients(node, beta_puct, budget, form)?
        .into_iter()
        .enumerate()
        .map(|(i, k)| k / (gamma - node.q(i)))
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|p| p / s).collect())
}

/// Spread a per-slot distribution over the nine board cells as clamped
/// log probabilities.
fn board_log_row(node: &SearchNode, probs: &[f64]) -> Vec<f64> {
    let mut row = vec![clamp_log(f64::NEG_INFINITY); 9];
    for (slot, &a) in node.actions.iter().enumerate() {
        row[a] = clamp_log(probs[slot].ln());
    }
    row
}

/// MCTS as an anytime agent: one budget unit is one expansion.
pub struct MctsAgent {
    pub params: MctsParams,
}

impl AnytimeAgent for MctsAgent {
    type State = Board;
    type Inference = SearchTree;

    fn num_actions(&self, _: &Board) -> usize {
        9
    }

    fn start(&self, state: &Board) -> Result<SearchTree> {
        SearchTree::new(*state, &self.params)
    }

    fn advance(&self, _: &Board, inference: &mut SearchTree) {
        inference.expand_once(&self.params);
    }

    fn steps(&self, inference: &SearchTree) -> u32 {
        inference.expansions() as u32
    }

    fn work(&self, inference: &SearchTree) -> u64 {
        inference.expansions()
    }

    fn extract(&self, _: &Board, inference: &SearchTree) -> Result<Vec<f64>> {
        let root = inference.root();
        let probs = final_policy_with(root, self.params.beta_puct, inference.expansions(), self.params.final_form)?;
        Ok(board_log_row(root, &probs))
    }
}

/// Budget-conditioned policy for one position from a single growing tree.
pub fn mcts_sweep(board: &Board, params: &MctsParams, grid: &BudgetGrid) -> Result<SweepOutcome> {
    crate::anytime::sweep_policies(&MctsAgent { params: *params }, board, grid)
}

/// Policies for each exploration coefficient at a fixed expansion budget;
/// rows follow `betas`.
pub fn puct_policies(
    board: &Board,
    params: &MctsParams,
    betas: &[f64],
    budget: u32,
) -> Result<BudgetConditionedPolicy> {
    let rows = betas
        .iter()
        .map(|&beta_puct| {
            let p = MctsParams { beta_puct, ..*params };
            let (row, _) = crate::anytime::run_fixed_budget(&MctsAgent { params: p }, board, budget)?;
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    BudgetConditionedPolicy::from_rows(&rows, board.code() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anytime::run_fixed_budget;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn puct_examples() {
        let fresh = SearchNode::from_stats(vec![0.25; 4], vec![0; 4], vec![0.0; 4]);
        assert_eq!(puct_select(&fresh, 1.0), 0);
        let one_unvisited = SearchNode::from_stats(vec![1.0 / 3.0; 3], vec![1, 0, 1], vec![0.2; 3]);
        assert_eq!(puct_select(&one_unvisited, 1.0), 1);
        let hand = SearchNode::from_stats(vec![0.5, 0.5], vec![2, 1], vec![0.1, 0.3]);
        let s0 = 0.1 + 0.5 * 3f64.sqrt() / 3.0;
        let s1 = 0.3 + 0.5 * 3f64.sqrt() / 2.0;
        assert!(s1 > s0);
        assert_eq!(puct_select(&hand, 1.0), 1);
    }

    #[test]
    fn gamma_examples() {
        let single = SearchNode::from_stats(vec![1.0], vec![4], vec![0.3]);
        let g = solve_gamma(&single, 1.5, 9).unwrap();
        assert_abs_diff_eq!(g, 0.3 + 1.5 * 3.0 / 5.0, epsilon = 1e-9);
        let sym = SearchNode::from_stats(vec![0.5, 0.5], vec![3, 3], vec![0.2, 0.2]);
        let p = final_policy(&sym, 1.0, 6).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
        let three = SearchNode::from_stats(vec![0.2, 0.3, 0.5], vec![5, 1, 3], vec![0.4, -0.2, 0.1]);
        let g = solve_gamma(&three, 2.0, 9).unwrap();
        let c = 2.0 * 3.0;
        let r: f64 = (0..3).map(|i| c / (three.visits[i] as f64 + 1.0) * three.prior[i] / (g - three.q(i))).sum();
        assert!((r - 1.0).abs() < 1e-10);
        assert!(solve_gamma(&three, 2.0, 0).is_err());
        assert_eq!(final_policy(&three, 2.0, 0).unwrap(), three.prior);
    }

    #[test]
    fn first_expansion_and_terminal_backup() {
        let p = MctsParams::default();
        let mut t = SearchTree::new(Board::empty(), &p).unwrap();
        t.expand_once(&p);
        assert_eq!(t.root().total_visits(), 1);
        assert_eq!(t.expansions(), 1);
        // X wins by playing cell 2
        let b: Board = "XX.OO....".parse().unwrap();
        let mut t = SearchTree::new(b, &p).unwrap();
        let mut saw = false;
        for _ in 0..200 {
            let trace = t.expand_once(&p);
            if trace.path.len() == 1 && t.root().actions[trace.path[0].1] == 2 {
                assert_eq!(trace.leaf_value, -1.0);
                saw = true;
            }
        }
        assert!(saw);
        let slot = t.root().actions.iter().position(|&a| a == 2).unwrap();
        assert_eq!(t.root().q(slot), 1.0);
        assert!(SearchTree::new("XXXOO....".parse().unwrap(), &p).is_err());
    }

    #[test]
    fn backups_equal_trace_means() {
        let p = MctsParams { beta_puct: 0.7, prior: PriorPolicy::Heuristic { temperature: 0.5 }, ..Default::default() };
        let mut t = SearchTree::new("X...O....".parse().unwrap(), &p).unwrap();
        let traces: Vec<BackupTrace> = (0..400).map(|_| t.expand_once(&p)).collect();
        let mut sums = std::collections::HashMap::<(usize, usize), (u32, f64)>::new();
        for tr in &traces {
            let mut v = tr.leaf_value;
            for &(n, s) in tr.path.iter().rev() {
                v = -v;
                let e = sums.entry((n, s)).or_default();
                e.0 += 1;
                e.1 += v;
            }
        }
        for n in 0..t.num_nodes() {
            let node = t.node(n);
            for s in 0..node.actions.len() {
                let (cnt, sum) = sums.get(&(n, s)).copied().unwrap_or_default();
                assert_eq!(node.visits[s], cnt);
                if cnt > 0 {
                    assert_abs_diff_eq!(node.q(s), sum / cnt as f64, epsilon = 1e-12);
                    assert!(node.q(s).abs() <= 1.0);
                }
            }
        }
        assert_eq!(t.root().total_visits(), 400);
    }

    #[test]
    fn sweep_snapshots_match_fresh_runs() {
        let p = MctsParams::default();
        let grid = BudgetGrid::mcts_default();
        let b: Board = "X...O..X.".parse().unwrap();
        let out = mcts_sweep(&b, &p, &grid).unwrap();
        assert_eq!(out.work, 256);
        let agent = MctsAgent { params: p };
        for (k, &budget) in grid.values().iter().enumerate() {
            let (row, work) = run_fixed_budget(&agent, &b, budget).unwrap();
            assert_eq!(work, budget as u64);
            assert_eq!(out.policy.row(k), row);
        }
        let zero = mcts_sweep(&b, &p, &BudgetGrid::new(vec![0]).unwrap()).unwrap();
        let legal = b.legal_actions();
        for a in 0..9 {
            let lp = zero.policy.row(0)[a];
            if legal.contains(&a) {
                assert_abs_diff_eq!(lp, (1.0 / legal.len() as f64).ln(), epsilon = 1e-12);
            } else {
                assert_eq!(lp, -1e9);
            }
        }
    }

    #[test]
    fn deep_search_prefers_the_minimax_move_on_the_empty_board() {
        let p = MctsParams::default();
        let mut t = SearchTree::new(Board::empty(), &p).unwrap();
        for _ in 0..10_000 {
            t.expand_once(&p);
        }
        let oracle = MinimaxOracle::shared();
        let root = t.root();
        let best_q = (0..9)
            .filter(|&s| -oracle.value(&Board::empty().play(root.actions[s]).unwrap()) == 0)
            .map(|s| root.q(s))
            .fold(f64::NEG_INFINITY, f64::max);
        for s in 0..9 {
            if -oracle.value(&Board::empty().play(root.actions[s]).unwrap()) < 0 {
                assert!(best_q >= root.q(s));
            }
        }
    }

    fn random_node(rng: &mut impl Rng) -> SearchNode {
        let n = rng.gen_range(1..=9);
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        SearchNode::from_stats(
            w.iter().map(|x| x / s).collect(),
            (0..n).map(|_| rng.gen_range(0..50)).collect(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    proptest! {
        #[test]
        fn gamma_residual_and_policy_mass(seed in any::<u64>(), beta in 0.05f64..10.0, budget in 1u64..2000) {
            let mut rng = crate::rng::rng_for(seed, 0, 0);
            let node = random_node(&mut rng);
            let g = solve_gamma(&node, beta, budget).unwrap();
            let max_q = (0..node.actions.len()).map(|i| node.q(i)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(g > max_q);
            let c = beta * (budget as f64).sqrt();
            let r: f64 = (0..node.actions.len())
                .map(|i| c / (node.visits[i] as f64 + 1.0) * node.prior[i] / (g - node.q(i)))
                .sum();
            prop_assert!((r - 1.0).abs() < 1e-10);
            for form in [FinalForm::PerAction, FinalForm::Regularized] {
                let p = final_policy_with(&node, beta, budget, form).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(p.iter().all(|&x| x > 0.0));
            }
        }
    }
}
