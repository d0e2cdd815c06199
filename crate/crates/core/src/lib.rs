//! Latent inference budget models.
//!
//! Agents are modeled as anytime inference procedures (truncated
//! breadth-first search, Rational Speech Acts recursion, Monte-Carlo tree
//! search) stopped at a latent budget. Reward parameters and per-subpopulation
//! budget priors are fitted by maximizing the likelihood of observed actions
//! with the budget marginalized out; Boltzmann-style baselines share the same
//! fitting engine.

pub mod anytime;
pub mod error;
pub mod exec;
pub mod fit;
pub mod harness;
pub mod maze;
pub mod mcts;
pub mod rng;
pub mod rsa;

pub use anytime::{
    budget_prior_probs, mixture_log_prob, sweep_policies, AnytimeAgent, BudgetConditionedPolicy, BudgetGrid,
    BudgetPrior,
};
pub use error::{Error, Result};
pub use exec::Execution;
