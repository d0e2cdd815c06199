//! Tabular Rational Speech Acts on finite reference games.
//!
//! Speakers are `[targets × utterances]` matrices whose rows are
//! distributions over utterances; listeners are `[utterances × targets]`
//! matrices whose rows are distributions over targets. Level 0 agents come
//! straight from the lexicon, and each recursion level is one exact
//! renormalization, which makes the recursion an anytime algorithm.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anytime::{clamp_log, prior_from_weights, AnytimeAgent, BudgetGrid, BudgetPrior, BudgetWeight};
use crate::error::{Error, Result};
use crate::maze::softplus;
use crate::rng::{derive_seed, rng_for, sample_categorical};

/// One reference game: a lexicon over the game's utterances and referents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGame {
    /// `[|U| × |T|]` nonnegative literal-compatibility weights.
    pub lexicon: Array2<f64>,
    pub target_prior: Vec<f64>,
    /// Vocabulary index of each utterance row.
    pub utterances: Vec<usize>,
    /// Vocabulary index of each referent column.
    pub referents: Vec<usize>,
}

impl ReferenceGame {
    /// Game with a uniform target prior and identity vocabulary indices.
    pub fn new(lexicon: Array2<f64>) -> Result<Self> {
        let (u, t) = lexicon.dim();
        let game = Self {
            lexicon,
            target_prior: vec![1.0 / t as f64; t],
            utterances: (0..u).collect(),
            referents: (0..t).collect(),
        };
        game.validate()?;
        Ok(game)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn num_utterances(&self) -> usize {
        self.lexicon.nrows()
    }

    pub fn num_targets(&self) -> usize {
        self.lexicon.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (u, t) = self.lexicon.dim();
        if u == 0 || t == 0 {
            return Err(Error::Lexicon("empty lexicon".into()));
        }
        if self.lexicon.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Lexicon("lexicon entries must be finite and nonnegative".into()));
        }
        if let Some(r) = (0..u).find(|&r| self.lexicon.row(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Lexicon(format!("utterance {r} applies to no referent")));
        }
        if let Some(c) = (0..t).find(|&c| self.lexicon.column(c).iter().all(|&x| x == 0.0)) {
            return Err(Error::Lexicon(format!("referent {c} has no utterance")));
        }
        if self.target_prior.len() != t
            || self.target_prior.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (self.target_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Lexicon(format!("invalid target prior {:?}", self.target_prior)));
        }
        if self.utterances.len() != u || self.referents.len() != t {
            return Err(Error::Lexicon("vocabulary index lists do not match the lexicon shape".into()));
        }
        Ok(())
    }
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Lexicon("ragged matrix".into()));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.iter().flatten().copied().collect())
        .map_err(|e| Error::Lexicon(e.to_string()))
}

/// Unconstrained lexicon over a whole vocabulary; a game's effective lexicon
/// is the softplus of its sub-block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconParams {
    /// `[vocab utterances × vocab referents]`.
    pub raw: Array2<f64>,
}

impl LexiconParams {
    pub fn zeros(num_utterances: usize, num_referents: usize) -> Self {
        Self { raw: Array2::zeros((num_utterances, num_referents)) }
    }

    pub fn from_flat(num_utterances: usize, num_referents: usize, flat: &[f64]) -> Result<Self> {
        Array2::from_shape_vec((num_utterances, num_referents), flat.to_vec())
            .map(|raw| Self { raw })
            .map_err(|e| Error::Parameter(e.to_string()))
    }

    /// Flat parameter index of vocabulary entry `(u, t)`.
    pub fn flat_index(&self, u: usize, t: usize) -> usize {
        u * self.raw.ncols() + t
    }

    pub fn effective_for(&self, game: &ReferenceGame) -> Result<Array2<f64>> {
        let (vu, vt) = self.raw.dim();
        if game.utterances.iter().any(|&u| u >= vu) || game.referents.iter().any(|&t| t >= vt) {
            return Err(Error::Contract("game vocabulary index outside the lexicon parameters".into()));
        }
        Ok(Array2::from_shape_fn(game.lexicon.dim(), |(u, t)| {
            softplus(self.raw[[game.utterances[u], game.referents[t]]])
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Speaker,
    Listener,
}

/// Row-stochastic speaker (`[T × U]`) or listener (`[U × T]`) at a
/// recursion level.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentMatrix {
    pub kind: AgentKind,
    pub level: u32,
    pub probs: Array2<f64>,
}

impl AgentMatrix {
    pub fn log_row(&self, r: usize) -> Vec<f64> {
        self.probs.row(r).iter().map(|&p| clamp_log(p.ln())).collect()
    }
}

/// Normalize each row; `Err(row)` on a zero row.
fn normalize_rows(mut m: Array2<f64>) -> std::result::Result<Array2<f64>, usize> {
    for (r, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let s: f64 = row.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(r);
        }
        row.mapv_inplace(|x| x / s);
    }
    Ok(m)
}

/// `L0(t|u) ∝ lexicon[u,t] · p(t)`.
pub fn literal_listener(game: &ReferenceGame, lexicon: &Array2<f64>) -> Result<AgentMatrix> {
    if lexicon.dim() != game.lexicon.dim() {
        return Err(Error::Contract("lexicon shape differs from the game".into()));
    }
    let mut m = lexicon.clone();
    for (t, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|x| x * game.target_prior[t]);
    }
    let probs = normalize_rows(m).map_err(|u| Error::Lexicon(format!("utterance {u} has no mass after the prior")))?;
    Ok(AgentMatrix { kind: AgentKind::Listener, level: 0, probs })
}

/// Level-0 speaker: `S0(u|t) ∝ lexicon[u,t]`.
pub fn literal_speaker(lexicon: &Array2<f64>) -> Result<AgentMatrix> {
    let probs = normalize_rows(lexicon.t().as_standard_layout().into_owned())
        .map_err(|t| Error::DegenerateGame(format!("referent {t} has no utterance")))?;
    Ok(AgentMatrix { kind: AgentKind::Speaker, level: 0, probs })
}

/// `S(u|t) ∝ L(t|u)`, normalized over utterances.
pub fn speaker_step(listener: &AgentMatrix) -> Result<AgentMatrix> {
    if listener.kind != AgentKind::Listener {
        return Err(Error::Contract("speaker_step expects a listener".into()));
    }
    let probs = normalize_rows(listener.probs.t().as_standard_layout().into_owned())
        .map_err(|t| Error::DegenerateGame(format!("target {t} has zero mass under every utterance")))?;
    Ok(AgentMatrix { kind: AgentKind::Speaker, level: listener.level + 1, probs })
}

/// `L(t|u) ∝ S(u|t) · p(t)`, normalized over targets.
pub fn listener_step(speaker: &AgentMatrix, target_prior: &[f64]) -> Result<AgentMatrix> {
    if speaker.kind != AgentKind::Speaker {
        return Err(Error::Contract("listener_step expects a speaker".into()));
    }
    if target_prior.len() != speaker.probs.nrows() {
        return Err(Error::Contract("target prior length differs from the speaker".into()));
    }
    let mut m = speaker.probs.t().as_standard_layout().into_owned();
    for (t, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|x| x * target_prior[t]);
    }
    let probs = normalize_rows(m)
        .map_err(|u| Error::DegenerateGame(format!("utterance {u} has zero mass under every target")))?;
    Ok(AgentMatrix { kind: AgentKind::Listener, level: speaker.level, probs })
}

/// `S(u|t) ∝ exp(β · log L(t|u))`. Zero listener entries give zero speaker
/// mass when `β > 0`; at `β = 0` every utterance gets mass `0^0 = 1`, so the
/// speaker is uniform.
pub fn boltzmann_speaker(listener: &AgentMatrix, beta_temp: f64) -> Result<AgentMatrix> {
    if listener.kind != AgentKind::Listener {
        return Err(Error::Contract("boltzmann_speaker expects a listener".into()));
    }
    if !beta_temp.is_finite() || beta_temp < 0.0 {
        return Err(Error::Parameter(format!("beta_temp must be finite and >= 0, got {beta_temp}")));
    }
    let lt = listener.probs.t();
    let (t_n, u_n) = lt.dim();
    let mut m = Array2::zeros((t_n, u_n));
    for t in 0..t_n {
        let logits: Vec<f64> =
            (0..u_n).map(|u| if beta_temp == 0.0 { 0.0 } else { beta_temp * lt[[t, u]].ln() }).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateGame(format!("target {t} has zero mass under every utterance")));
        }
        for u in 0..u_n {
            m[[t, u]] = (logits[u] - max).exp();
        }
    }
    let probs = normalize_rows(m).map_err(|t| Error::DegenerateGame(format!("target {t} has no mass")))?;
    Ok(AgentMatrix { kind: AgentKind::Speaker, level: listener.level + 1, probs })
}

/// Speakers and listeners at every grid level of one game.
#[derive(Clone, Debug)]
pub struct RsaSweep {
    pub speakers: Vec<AgentMatrix>,
    pub listeners: Vec<AgentMatrix>,
    /// Recursion levels computed (one speaker and one listener
    /// renormalization each).
    pub levels: u32,
}

/// All grid levels from a single pass up the recursion.
pub fn rsa_sweep(game: &ReferenceGame, lexicon: &Array2<f64>, grid: &BudgetGrid) -> Result<RsaSweep> {
    let mut state = RsaState::start(game, lexicon)?;
    let mut speakers = Vec::with_capacity(grid.len());
    let mut listeners = Vec::with_capacity(grid.len());
    for &level in grid.values() {
        while state.level < level {
            state.advance(&game.target_prior)?;
        }
        speakers.push(state.speaker.clone());
        listeners.push(state.listener.clone());
    }
    Ok(RsaSweep { speakers, listeners, levels: state.level })
}

/// Inference state of the recursion: the level-k speaker and listener.
#[derive(Clone, Debug)]
pub struct RsaState {
    pub level: u32,
    pub speaker: AgentMatrix,
    pub listener: AgentMatrix,
}

impl RsaState {
    pub fn start(game: &ReferenceGame, lexicon: &Array2<f64>) -> Result<Self> {
        Ok(Self { level: 0, speaker: literal_speaker(lexicon)?, listener: literal_listener(game, lexicon)? })
    }

    pub fn advance(&mut self, target_prior: &[f64]) -> Result<()> {
        self.speaker = speaker_step(&self.listener)?;
        self.listener = listener_step(&self.speaker, target_prior)?;
        self.level += 1;
        Ok(())
    }
}

/// Which agent's choices are observed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RsaSide {
    /// Utterance given target.
    #[default]
    Speaker,
    /// Chosen referent given utterance.
    Listener,
}

/// RSA recursion as an anytime agent. The state is a target index for the
/// speaker side and an utterance index for the listener side.
pub struct RsaAgent<'a> {
    pub game: &'a ReferenceGame,
    pub lexicon: Array2<f64>,
    pub side: RsaSide,
}

impl AnytimeAgent for RsaAgent<'_> {
    type State = usize;
    type Inference = RsaState;

    fn num_actions(&self, _: &usize) -> usize {
        match self.side {
            RsaSide::Speaker => self.game.num_utterances(),
            RsaSide::Listener => self.game.num_targets(),
        }
    }

    fn start(&self, state: &usize) -> Result<RsaState> {
        let rows = match self.side {
            RsaSide::Speaker => self.game.num_targets(),
            RsaSide::Listener => self.game.num_utterances(),
        };
        if *state >= rows {
            return Err(Error::Environment(format!("state {state} out of range")));
        }
        RsaState::start(self.game, &self.lexicon)
    }

    fn advance(&self, _: &usize, inference: &mut RsaState) {
        // the game was validated at start; a failure here is a broken invariant
        inference.advance(&self.game.target_prior).expect("recursion on a valid game");
    }

    fn steps(&self, inference: &RsaState) -> u32 {
        inference.level
    }

    fn work(&self, inference: &RsaState) -> u64 {
        inference.level as u64
    }

    fn extract(&self, state: &usize, inference: &RsaState) -> Result<Vec<f64>> {
        Ok(match self.side {
            RsaSide::Speaker => inference.speaker.log_row(*state),
            RsaSide::Listener => inference.listener.log_row(*state),
        })
    }
}

/// One observed round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsaRecord {
    pub game_id: usize,
    pub subpop_id: usize,
    pub lexicon: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
    pub target_index: usize,
    pub utterance_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utterance_ids: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referent_ids: Option<Vec<usize>>,
}

impl RsaRecord {
    pub fn game(&self) -> Result<ReferenceGame> {
        let lexicon = rows_to_array(&self.lexicon)?;
        let (u, t) = lexicon.dim();
        let game = ReferenceGame {
            lexicon,
            target_prior: self.prior.clone(),
            utterances: self.utterance_ids.clone().unwrap_or_else(|| (0..u).collect()),
            referents: self.referent_ids.clone().unwrap_or_else(|| (0..t).collect()),
        };
        game.validate()?;
        Ok(game)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsaDataConfig {
    pub vocab_utterances: usize,
    pub vocab_referents: usize,
    /// Referents per game.
    #[serde(default = "default_context")]
    pub context_size: usize,
    /// Probability that a vocabulary utterance applies to a referent.
    pub ambiguity: f64,
    /// Scale each applicable vocabulary entry by a draw from U(0.05, 1).
    #[serde(default)]
    pub graded: bool,
    /// Per-game target prior with weights drawn from U(0.1, 1) instead of
    /// uniform.
    #[serde(default)]
    pub random_prior: bool,
    pub num_games: usize,
    pub rounds_per_subpop: usize,
    pub grid: BudgetGrid,
    pub subpopulations: Vec<Vec<BudgetWeight>>,
}

fn default_context() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsaPopulation {
    /// Hard 0/1 vocabulary lexicon used to build every game.
    pub vocabulary: Array2<f64>,
    pub games: Vec<ReferenceGame>,
    pub records: Vec<RsaRecord>,
}

const STREAM_VOCAB: u64 = 11;
const STREAM_GAMES: u64 = 12;
const STREAM_ROUNDS: u64 = 13;
const STREAM_GRADES: u64 = 14;

/// Random hard lexicon where every utterance and referent has at least one
/// compatible partner.
pub fn random_vocabulary(seed: u64, utterances: usize, referents: usize, ambiguity: f64) -> Result<Array2<f64>> {
    if utterances == 0 || referents == 0 || !(0.0..=1.0).contains(&ambiguity) {
        return Err(Error::Config("vocabulary needs positive sizes and ambiguity in [0,1]".into()));
    }
    let mut rng = rng_for(seed, STREAM_VOCAB, 0);
    let mut lex = Array2::zeros((utterances, referents));
    for u in 0..utterances {
        for t in 0..referents {
            if sample_categorical(&[1.0 - ambiguity, ambiguity], &mut rng) == 1 {
                lex[[u, t]] = 1.0;
            }
        }
        if lex.row(u).sum() == 0.0 {
            let t = sample_categorical(&vec![1.0; referents], &mut rng);
            lex[[u, t]] = 1.0;
        }
    }
    for t in 0..referents {
        if lex.column(t).sum() == 0.0 {
            let u = sample_categorical(&vec![1.0; utterances], &mut rng);
            lex[[u, t]] = 1.0;
        }
    }
    Ok(lex)
}

/// Game over a random context of referents; utterances that fit none of
/// them are dropped.
fn sample_game(
    vocab: &Array2<f64>,
    context: usize,
    random_prior: bool,
    seed: u64,
    index: u64,
) -> Result<ReferenceGame> {
    let mut rng = rng_for(seed, STREAM_GAMES, index);
    let (vu, vt) = vocab.dim();
    let mut pool: Vec<usize> = (0..vt).collect();
    let mut referents = Vec::with_capacity(context);
    for _ in 0..context {
        let i = sample_categorical(&vec![1.0; pool.len()], &mut rng);
        referents.push(pool.swap_remove(i));
    }
    referents.sort_unstable();
    let utterances: Vec<usize> = (0..vu).filter(|&u| referents.iter().any(|&t| vocab[[u, t]] > 0.0)).collect();
    let lexicon =
        Array2::from_shape_fn((utterances.len(), referents.len()), |(i, j)| vocab[[utterances[i], referents[j]]]);
    let t = referents.len();
    let target_prior = if random_prior {
        let w: Vec<f64> = (0..t).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    } else {
        vec![1.0 / t as f64; t]
    };
    let game = ReferenceGame { lexicon, target_prior, utterances, referents };
    game.validate()?;
    Ok(game)
}

/// Synthetic reference-game rounds: each round picks a game, a target from
/// the game's prior, a recursion level from the subpopulation's budget
/// prior, and an utterance from that level's speaker.
pub fn generate_population(config: &RsaDataConfig, seed: u64) -> Result<RsaPopulation> {
    if config.context_size == 0 || config.context_size > config.vocab_referents {
        return Err(Error::Config("context_size must be in 1..=vocab_referents".into()));
    }
    let mut vocabulary = random_vocabulary(seed, config.vocab_utterances, config.vocab_referents, config.ambiguity)?;
    if config.graded {
        let mut rng = rng_for(seed, STREAM_GRADES, 0);
        vocabulary.mapv_inplace(|x| if x > 0.0 { rng.gen_range(0.05..1.0) } else { 0.0 });
    }
    let games = (0..config.num_games)
        .map(|g| sample_game(&vocabulary, config.context_size, config.random_prior, seed, g as u64))
        .collect::<Result<Vec<_>>>()?;
    let priors = config
        .subpopulations
        .iter()
        .enumerate()
        .map(|(i, w)| prior_from_weights(&config.grid, w, i))
        .collect::<Result<Vec<_>>>()?;
    let records = sample_rounds(&games, &config.grid, &priors, config.rounds_per_subpop, seed)?;
    Ok(RsaPopulation { vocabulary, games, records })
}

/// Rounds for each subpopulation prior over a fixed set of games.
pub fn sample_rounds(
    games: &[ReferenceGame],
    grid: &BudgetGrid,
    priors: &[BudgetPrior],
    rounds_per_subpop: usize,
    seed: u64,
) -> Result<Vec<RsaRecord>> {
    if games.is_empty() {
        return Ok(Vec::new());
    }
    let sweeps = games.iter().map(|g| rsa_sweep(g, &g.lexicon, grid)).collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(priors.len() * rounds_per_subpop);
    for prior in priors {
        let w = prior.probabilities()?;
        let mut rng = rng_for(derive_seed(seed, STREAM_ROUNDS, prior.subpopulation as u64), 0, 0);
        for _ in 0..rounds_per_subpop {
            let g = sample_categorical(&vec![1.0; games.len()], &mut rng);
            let game = &games[g];
            let t = sample_categorical(&game.target_prior, &mut rng);
            let k = sample_categorical(&w, &mut rng);
            let speaker = &sweeps[g].speakers[k];
            let u = sample_categorical(speaker.probs.row(t).as_slice().expect("contiguous"), &mut rng);
            records.push(RsaRecord {
                game_id: g,
                subpop_id: prior.subpopulation,
                lexicon: game.lexicon.rows().into_iter().map(|r| r.to_vec()).collect(),
                prior: game.target_prior.clone(),
                target_index: t,
                utterance_index: u,
                utterance_ids: Some(game.utterances.clone()),
                referent_ids: Some(game.referents.clone()),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anytime::sweep_policies;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn canonical() -> ReferenceGame {
        ReferenceGame::new(array![[1.0, 1.0], [0.0, 1.0]]).unwrap()
    }

    fn assert_matrix(m: &Array2<f64>, expect: &[&[f64]], tol: f64) {
        for (r, row) in expect.iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                assert_abs_diff_eq!(m[[r, c]], x, epsilon = tol);
            }
        }
    }

    #[test]
    fn canonical_game_levels() {
        let g = canonical();
        let l0 = literal_listener(&g, &g.lexicon).unwrap();
        assert_matrix(&l0.probs, &[&[0.5, 0.5], &[0.0, 1.0]], 1e-15);
        let s1 = speaker_step(&l0).unwrap();
        assert_eq!(s1.level, 1);
        assert_matrix(&s1.probs, &[&[1.0, 0.0], &[1.0 / 3.0, 2.0 / 3.0]], 1e-15);
        let l1 = listener_step(&s1, &g.target_prior).unwrap();
        assert_matrix(&l1.probs, &[&[0.75, 0.25], &[0.0, 1.0]], 1e-15);
    }

    #[test]
    fn uniform_and_degenerate_cases() {
        let g = ReferenceGame::new(Array2::ones((3, 3))).unwrap();
        let l0 = literal_listener(&g, &g.lexicon).unwrap();
        assert!(l0.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let s1 = speaker_step(&l0).unwrap();
        assert!(s1.probs.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let one = ReferenceGame::new(array![[2.0]]).unwrap();
        assert_eq!(literal_listener(&one, &one.lexicon).unwrap().probs, array![[1.0]]);
    }

    #[test]
    fn uniform_speaker_gives_prior_listener() {
        let s = AgentMatrix { kind: AgentKind::Speaker, level: 1, probs: Array2::from_elem((3, 4), 0.25) };
        let p = [0.2, 0.5, 0.3];
        let l = listener_step(&s, &p).unwrap();
        for u in 0..4 {
            for t in 0..3 {
                assert_abs_diff_eq!(l.probs[[u, t]], p[t], epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_lexicon_is_a_fixed_point() {
        let g = ReferenceGame::new(array![[1.0, 0.5], [0.5, 1.0]]).unwrap();
        let l0 = literal_listener(&g, &g.lexicon).unwrap();
        let l1 = listener_step(&speaker_step(&l0).unwrap(), &g.target_prior).unwrap();
        for (a, b) in l0.probs.iter().zip(l1.probs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn invalid_lexicons_rejected() {
        assert!(matches!(ReferenceGame::new(array![[0.0, 0.0], [1.0, 1.0]]), Err(Error::Lexicon(_))));
        assert!(matches!(ReferenceGame::new(array![[1.0, 0.0], [1.0, 0.0]]), Err(Error::Lexicon(_))));
        let l = AgentMatrix { kind: AgentKind::Listener, level: 0, probs: array![[1.0, 0.0], [1.0, 0.0]] };
        assert!(matches!(speaker_step(&l), Err(Error::DegenerateGame(_))));
        let s = AgentMatrix { kind: AgentKind::Speaker, level: 1, probs: array![[1.0, 0.0], [1.0, 0.0]] };
        assert!(matches!(listener_step(&s, &[0.5, 0.5]), Err(Error::DegenerateGame(_))));
    }

    #[test]
    fn boltzmann_examples() {
        let g = canonical();
        let l0 = literal_listener(&g, &g.lexicon).unwrap();
        let s = boltzmann_speaker(&l0, 2.0).unwrap();
        assert_abs_diff_eq!(s.probs[[1, 0]], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(s.probs[[1, 1]], 0.8, epsilon = 1e-15);
        let sharp = boltzmann_speaker(&l0, 200.0).unwrap();
        assert!(sharp.probs[[1, 1]] > 1.0 - 1e-12);
        let flat = boltzmann_speaker(&l0, 0.0).unwrap();
        assert!(flat.probs.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let one = boltzmann_speaker(&l0, 1.0).unwrap();
        assert_eq!(one.probs, speaker_step(&l0).unwrap().probs);
        assert!(boltzmann_speaker(&l0, -1.0).is_err());
    }

    #[test]
    fn sweep_counts_levels_once() {
        let g = canonical();
        let grid = BudgetGrid::rsa_default();
        let sweep = rsa_sweep(&g, &g.lexicon, &grid).unwrap();
        assert_eq!(sweep.levels, 3);
        let s1 = speaker_step(&literal_listener(&g, &g.lexicon).unwrap()).unwrap();
        assert_eq!(sweep.speakers[1].probs, s1.probs);
        assert_eq!(sweep.speakers[0].probs, literal_speaker(&g.lexicon).unwrap().probs);
    }

    #[test]
    fn level_three_matches_manual_iteration() {
        let vocab = random_vocabulary(5, 3, 3, 0.6).unwrap();
        let game = ReferenceGame::new(vocab).unwrap();
        let sweep = rsa_sweep(&game, &game.lexicon, &BudgetGrid::new(vec![3]).unwrap()).unwrap();
        let mut l = literal_listener(&game, &game.lexicon).unwrap();
        let mut s = literal_speaker(&game.lexicon).unwrap();
        for _ in 0..3 {
            s = speaker_step(&l).unwrap();
            l = listener_step(&s, &game.target_prior).unwrap();
        }
        assert_eq!(sweep.speakers[0].probs, s.probs);
        assert_eq!(sweep.listeners[0].probs, l.probs);
    }

    #[test]
    fn anytime_agent_snapshots_match_and_cost_max_level() {
        let g = ReferenceGame::new(random_vocabulary(8, 4, 3, 0.5).unwrap()).unwrap();
        let grid = BudgetGrid::rsa_default();
        let agent = RsaAgent { game: &g, lexicon: g.lexicon.clone(), side: RsaSide::Speaker };
        let sweep = rsa_sweep(&g, &g.lexicon, &grid).unwrap();
        for t in 0..3 {
            let out = sweep_policies(&agent, &t, &grid).unwrap();
            assert_eq!(out.work, grid.max() as u64);
            for k in 0..grid.len() {
                assert_eq!(out.policy.row(k), sweep.speakers[k].log_row(t));
            }
        }
    }

    #[test]
    fn population_generation() {
        let cfg = RsaDataConfig {
            vocab_utterances: 6,
            vocab_referents: 5,
            context_size: 3,
            ambiguity: 0.4,
            graded: false,
            random_prior: false,
            num_games: 10,
            rounds_per_subpop: 50,
            grid: BudgetGrid::rsa_default(),
            subpopulations: vec![vec![BudgetWeight { budget: 0, weight: 1.0 }]],
        };
        let a = generate_population(&cfg, 4).unwrap();
        let b = generate_population(&cfg, 4).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 50);
        for r in &a.records {
            let g = r.game().unwrap();
            assert!(g.lexicon[[r.utterance_index, r.target_index]] > 0.0);
        }
        let empty = generate_population(&RsaDataConfig { num_games: 0, ..cfg }, 4).unwrap();
        assert!(empty.records.is_empty());
    }

    #[test]
    fn literal_speaker_frequencies_chi_square() {
        let game = ReferenceGame::new(random_vocabulary(17, 5, 3, 0.5).unwrap()).unwrap();
        let grid = BudgetGrid::rsa_default();
        let prior = BudgetPrior::point_mass(grid.len(), 0, 0);
        let records = sample_rounds(std::slice::from_ref(&game), &grid, &[prior], 10_000, 3).unwrap();
        let s0 = literal_speaker(&game.lexicon).unwrap();
        let (nt, nu) = s0.probs.dim();
        let mut counts = Array2::<f64>::zeros((nt, nu));
        for r in &records {
            counts[[r.target_index, r.utterance_index]] += 1.0;
        }
        let mut chi2 = 0.0;
        let mut dof = 0usize;
        for t in 0..nt {
            let n: f64 = counts.row(t).sum();
            let support = (0..nu).filter(|&u| s0.probs[[t, u]] > 0.0).count();
            dof += support - 1;
            for u in 0..nu {
                let e = n * s0.probs[[t, u]];
                if e > 0.0 {
                    chi2 += (counts[[t, u]] - e).powi(2) / e;
                } else {
                    assert_eq!(counts[[t, u]], 0.0);
                }
            }
        }
        // well above the 99.9% quantile for these degrees of freedom
        let bound = dof as f64 + 6.0 * (2.0 * dof as f64).sqrt() + 10.0;
        assert!(chi2 < bound, "chi2={chi2} dof={dof}");
    }

    proptest! {
        #[test]
        fn rows_stochastic_and_permutation_equivariant(seed in 0u64..500, perm_seed in 0u64..50) {
            let lex = random_vocabulary(seed, 4, 3, 0.5).unwrap();
            let g = ReferenceGame::new(lex.clone()).unwrap();
            let sweep = rsa_sweep(&g, &g.lexicon, &BudgetGrid::rsa_default()).unwrap();
            for m in sweep.speakers.iter().chain(&sweep.listeners) {
                for row in m.probs.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }
            // relabel utterances by a rotation
            let shift = (perm_seed % 4) as usize;
            let perm: Vec<usize> = (0..4).map(|u| (u + shift) % 4).collect();
            let plex = Array2::from_shape_fn((4, 3), |(u, t)| lex[[perm[u], t]]);
            let pg = ReferenceGame::new(plex).unwrap();
            let ps = rsa_sweep(&pg, &pg.lexicon, &BudgetGrid::rsa_default()).unwrap();
            for (a, b) in sweep.speakers.iter().zip(&ps.speakers) {
                for t in 0..3 {
                    for u in 0..4 {
                        prop_assert!((a.probs[[t, perm[u]]] - b.probs[[t, u]]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
