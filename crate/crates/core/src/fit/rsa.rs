use std::collections::BTreeMap;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{group_observations, ContextPolicy, Jacobian, Observation, PolicyFamily};
use crate::anytime::{clamp_log, BudgetGrid};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::maze::{sigmoid, softplus};
use crate::rsa::{
    boltzmann_speaker, listener_step, literal_listener, literal_speaker, AgentMatrix, LexiconParams, ReferenceGame,
    RsaRecord, RsaSide, RsaState,
};

/// Whether the lexicon is taken from the records or learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum RsaThetaMode {
    /// Use each record's lexicon as is; no θ.
    Frozen,
    /// Learn a softplus lexicon over the whole vocabulary; records must
    /// carry vocabulary ids.
    Joint { vocab_utterances: usize, vocab_referents: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum RsaGrid {
    /// Recursion levels.
    Levels(BudgetGrid),
    /// Boltzmann speaker inverse temperatures over the literal listener.
    Temps(Vec<f64>),
}

impl RsaGrid {
    fn len(&self) -> usize {
        match self {
            RsaGrid::Levels(g) => g.len(),
            RsaGrid::Temps(t) => t.len(),
        }
    }
}

/// Per-game policies: for each state row a `[budgets × actions]` log
/// policy and, when requested, its Jacobian over the game's θ entries.
pub struct GameCache {
    rows: Vec<Array2<f64>>,
    jac: Option<Vec<Array3<f64>>>,
    params: Vec<usize>,
}

pub struct RsaFamily {
    games: Vec<ReferenceGame>,
    /// `(game position, state)` per context.
    keys: Vec<(usize, usize)>,
    observations: Vec<Vec<Observation>>,
    side: RsaSide,
    grid: RsaGrid,
    mode: RsaThetaMode,
}

impl RsaFamily {
    pub fn new(records: &[RsaRecord], side: RsaSide, grid: RsaGrid, mode: RsaThetaMode) -> Result<Self> {
        if let RsaGrid::Temps(t) = &grid {
            if t.is_empty() || t.iter().any(|b| !b.is_finite() || *b < 0.0) {
                return Err(Error::Parameter(format!("temperature grid must be finite and >= 0, got {t:?}")));
            }
        }
        let mut by_id: BTreeMap<usize, (usize, &RsaRecord)> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            match by_id.get(&r.game_id) {
                Some((_, first)) => {
                    if first.lexicon != r.lexicon
                        || first.prior != r.prior
                        || first.utterance_ids != r.utterance_ids
                        || first.referent_ids != r.referent_ids
                    {
                        return Err(Error::Data {
                            record: i,
                            msg: format!("game {} differs from its first record", r.game_id),
                        });
                    }
                }
                None => {
                    by_id.insert(r.game_id, (i, r));
                }
            }
        }
        let mut pos = BTreeMap::new();
        let mut games = Vec::with_capacity(by_id.len());
        for (id, (i, r)) in &by_id {
            let g = r.game().map_err(|e| Error::Data { record: *i, msg: e.to_string() })?;
            if let RsaThetaMode::Joint { vocab_utterances, vocab_referents } = mode {
                if r.utterance_ids.is_none() || r.referent_ids.is_none() {
                    return Err(Error::Data { record: *i, msg: "joint lexicon fitting needs vocabulary ids".into() });
                }
                if g.utterances.iter().any(|&u| u >= vocab_utterances)
                    || g.referents.iter().any(|&t| t >= vocab_referents)
                {
                    return Err(Error::Data {
                        record: *i,
                        msg: "vocabulary id outside the configured vocabulary".into(),
                    });
                }
            }
            pos.insert(*id, games.len());
            games.push(g);
        }
        let mut items = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            let g = &games[pos[&r.game_id]];
            if r.target_index >= g.num_targets() || r.utterance_index >= g.num_utterances() {
                return Err(Error::Data { record: i, msg: "target or utterance index out of range".into() });
            }
            let (state, action) = match side {
                RsaSide::Speaker => (r.target_index, r.utterance_index),
                RsaSide::Listener => (r.utterance_index, r.target_index),
            };
            items.push(((pos[&r.game_id], state), action, r.subpop_id, i));
        }
        let (keys, observations) = group_observations(items);
        Ok(Self { games, keys, observations, side, grid, mode })
    }

    pub fn games(&self) -> &[ReferenceGame] {
        &self.games
    }

    fn game_cache(&self, game: &ReferenceGame, theta: &[f64], want_grad: bool) -> Result<GameCache> {
        let (lex, tangents, params) = match self.mode {
            RsaThetaMode::Frozen => (game.lexicon.clone(), None, Vec::new()),
            RsaThetaMode::Joint { vocab_utterances, vocab_referents } => {
                let lp = LexiconParams::from_flat(vocab_utterances, vocab_referents, theta)?;
                let lex = lp.effective_for(game)?;
                let (u_n, t_n) = lex.dim();
                let mut params = Vec::with_capacity(u_n * t_n);
                let mut tangents = Vec::with_capacity(u_n * t_n);
                for u in 0..u_n {
                    for t in 0..t_n {
                        let g = lp.flat_index(game.utterances[u], game.referents[t]);
                        params.push(g);
                        if want_grad {
                            let raw = theta[g];
                            let mut d = Array2::zeros((u_n, t_n));
                            d[[u, t]] = sigmoid(raw) / softplus(raw);
                            tangents.push(d);
                        }
                    }
                }
                (lex, want_grad.then_some(tangents), params)
            }
        };
        let mats = self.matrices(game, &lex, tangents.as_deref())?;
        let rows_n = match self.side {
            RsaSide::Speaker => game.num_targets(),
            RsaSide::Listener => game.num_utterances(),
        };
        let k = mats.len();
        let a_n = mats[0].0.probs.ncols();
        let p = params.len();
        let mut rows = vec![Array2::zeros((k, a_n)); rows_n];
        let mut jac = tangents.as_ref().map(|_| vec![Array3::zeros((k, a_n, p)); rows_n]);
        for (j, (m, dm)) in mats.iter().enumerate() {
            for s in 0..rows_n {
                for a in 0..a_n {
                    rows[s][[j, a]] = clamp_log(m.probs[[s, a]].ln());
                    if let (Some(jac), Some(dm)) = (jac.as_mut(), dm) {
                        for (pi, d) in dm.iter().enumerate() {
                            jac[s][[j, a, pi]] = d[[s, a]];
                        }
                    }
                }
            }
        }
        Ok(GameCache { rows, jac, params })
    }

    /// The observed agent's matrix at each grid entry, with its log
    /// tangents when `dlex` is given.
    fn matrices(
        &self,
        game: &ReferenceGame,
        lex: &Array2<f64>,
        dlex: Option<&[Array2<f64>]>,
    ) -> Result<Vec<(AgentMatrix, Option<Vec<Array2<f64>>>)>> {
        let p = &game.target_prior;
        let l0 = literal_listener(game, lex)?;
        let dl0 = dlex.map(|d| d.iter().map(|t| tangent_literal_listener(&l0, t)).collect::<Vec<_>>());
        let mut out = Vec::with_capacity(self.grid.len());
        match &self.grid {
            RsaGrid::Levels(grid) => {
                let s0 = literal_speaker(lex)?;
                let ds0 = dlex.map(|d| d.iter().map(|t| tangent_literal_speaker(&s0, t)).collect::<Vec<_>>());
                let mut state = RsaState { level: 0, speaker: s0, listener: l0 };
                let (mut ds, mut dl) = (ds0, dl0);
                for &level in grid.values() {
                    while state.level < level {
                        state.advance(p)?;
                        if let Some(prev) = &dl {
                            let new_ds: Vec<_> = prev.iter().map(|t| tangent_speaker(&state.speaker, t, 1.0)).collect();
                            dl = Some(new_ds.iter().map(|t| tangent_listener(&state.listener, t)).collect());
                            ds = Some(new_ds);
                        }
                    }
                    out.push(match self.side {
                        RsaSide::Speaker => (state.speaker.clone(), ds.clone()),
                        RsaSide::Listener => (state.listener.clone(), dl.clone()),
                    });
                }
            }
            RsaGrid::Temps(temps) => {
                for &b in temps {
                    let s = boltzmann_speaker(&l0, b)?;
                    let ds = dl0.as_ref().map(|d| d.iter().map(|t| tangent_speaker(&s, t, b)).collect::<Vec<_>>());
                    out.push(match self.side {
                        RsaSide::Speaker => (s, ds),
                        RsaSide::Listener => {
                            let l = listener_step(&s, p)?;
                            let dl = ds.map(|d| d.iter().map(|t| tangent_listener(&l, t)).collect());
                            (l, dl)
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

// Log-space tangents. Each normalization `y ∝ x` along a row gives
// `d log y = d log x − Σ y · d log x` over that row.

fn tangent_literal_listener(l0: &AgentMatrix, dlex: &Array2<f64>) -> Array2<f64> {
    let (u_n, t_n) = dlex.dim();
    Array2::from_shape_fn((u_n, t_n), |(u, t)| {
        dlex[[u, t]] - (0..t_n).map(|s| l0.probs[[u, s]] * dlex[[u, s]]).sum::<f64>()
    })
}

fn tangent_literal_speaker(s0: &AgentMatrix, dlex: &Array2<f64>) -> Array2<f64> {
    let (u_n, t_n) = dlex.dim();
    Array2::from_shape_fn((t_n, u_n), |(t, u)| {
        dlex[[u, t]] - (0..u_n).map(|v| s0.probs[[t, v]] * dlex[[v, t]]).sum::<f64>()
    })
}

/// Speaker `∝ exp(β log L)`; β = 1 is the plain recursion step.
fn tangent_speaker(s: &AgentMatrix, dl: &Array2<f64>, beta: f64) -> Array2<f64> {
    let (u_n, t_n) = dl.dim();
    Array2::from_shape_fn((t_n, u_n), |(t, u)| {
        beta * (dl[[u, t]] - (0..u_n).map(|v| s.probs[[t, v]] * dl[[v, t]]).sum::<f64>())
    })
}

fn tangent_listener(l: &AgentMatrix, ds: &Array2<f64>) -> Array2<f64> {
    let (t_n, u_n) = ds.dim();
    Array2::from_shape_fn((u_n, t_n), |(u, t)| ds[[t, u]] - (0..t_n).map(|s| l.probs[[u, s]] * ds[[s, u]]).sum::<f64>())
}

impl PolicyFamily for RsaFamily {
    type Prepared = Vec<GameCache>;

    fn num_theta(&self) -> usize {
        match self.mode {
            RsaThetaMode::Frozen => 0,
            RsaThetaMode::Joint { vocab_utterances, vocab_referents } => vocab_utterances * vocab_referents,
        }
    }

    fn num_budgets(&self) -> usize {
        self.grid.len()
    }

    fn observations(&self) -> &[Vec<Observation>] {
        &self.observations
    }

    fn prepare(&self, theta: &[f64], want_grad: bool, exec: Execution) -> Result<Vec<GameCache>> {
        if let Some(x) = theta.iter().find(|x| !x.is_finite()) {
            return Err(Error::Parameter(format!("non-finite lexicon parameter {x}")));
        }
        map_slice(exec, &self.games, |g| self.game_cache(g, theta, want_grad)).into_iter().collect()
    }

    fn evaluate(&self, prep: &Vec<GameCache>, context: usize, want_grad: bool) -> Result<ContextPolicy> {
        let (g, s) = self.keys[context];
        let cache = &prep[g];
        let jacobian = if want_grad {
            cache.jac.as_ref().map(|j| Jacobian { params: cache.params.clone(), values: j[s].clone() })
        } else {
            None
        };
        Ok(ContextPolicy { log_probs: cache.rows[s].clone(), jacobian })
    }
}
