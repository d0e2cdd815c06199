use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::SplitFractions;
use super::Domain;
use crate::anytime::{BudgetGrid, BudgetWeight};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, Optimizer};
use crate::maze::{ExitReach, MazeDataConfig};
use crate::mcts::{GameDataConfig, MctsParams, PUCT_BASELINE_BETAS, PUCT_BASELINE_BUDGET};
use crate::rsa::{RsaDataConfig, RsaSide};

pub const CONFIG_VERSION: u32 = 1;

/// Learning rates tried by a maze sweep when the config lists none.
pub const MAZE_LEARNING_RATES: [f64; 10] = [1.0, 0.5, 1e-1, 0.05, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub split: SplitFractions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainConfig {
    Maze(MazeExperiment),
    Rsa(RsaExperiment),
    Game(GameExperiment),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeExperiment {
    pub data: MazeDataConfig,
    /// Inverse temperatures of the Boltzmann baseline.
    #[serde(default = "default_maze_temps")]
    pub temps: Vec<f64>,
    #[serde(default)]
    pub reach: ExitReach,
    /// Budgets fitted as frozen point masses; defaults to the whole grid.
    #[serde(default)]
    pub fixed_budgets: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsaExperiment {
    pub data: RsaDataConfig,
    #[serde(default)]
    pub side: RsaSide,
    /// Learn a softplus lexicon over the vocabulary instead of using the
    /// lexicons stored with the records.
    #[serde(default)]
    pub learn_lexicon: bool,
    /// Speaker inverse temperatures of the Boltzmann baseline.
    #[serde(default = "default_rsa_temps")]
    pub temps: Vec<f64>,
    #[serde(default)]
    pub fixed_budgets: Option<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameExperiment {
    pub data: GameDataConfig,
    #[serde(default = "default_puct_betas")]
    pub puct_betas: Vec<f64>,
    #[serde(default = "default_puct_budget")]
    pub puct_budget: u32,
    #[serde(default)]
    pub fixed_budgets: Option<Vec<u32>>,
}

fn default_maze_temps() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
}

fn default_rsa_temps() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0]
}

fn default_puct_betas() -> Vec<f64> {
    PUCT_BASELINE_BETAS.to_vec()
}

fn default_puct_budget() -> u32 {
    PUCT_BASELINE_BUDGET
}

fn point_masses(budgets: &[u32]) -> Vec<Vec<BudgetWeight>> {
    budgets.iter().map(|&b| vec![BudgetWeight { budget: b, weight: 1.0 }]).collect()
}

impl DomainConfig {
    pub fn domain(&self) -> Domain {
        match self {
            DomainConfig::Maze(_) => Domain::Maze,
            DomainConfig::Rsa(_) => Domain::Rsa,
            DomainConfig::Game(_) => Domain::Game,
        }
    }

    pub fn grid(&self) -> &BudgetGrid {
        match self {
            DomainConfig::Maze(m) => &m.data.grid,
            DomainConfig::Rsa(r) => &r.data.grid,
            DomainConfig::Game(g) => &g.data.grid,
        }
    }

    /// Generating weights per subpopulation.
    pub fn subpopulations(&self) -> &[Vec<BudgetWeight>] {
        match self {
            DomainConfig::Maze(m) => &m.data.subpopulations,
            DomainConfig::Rsa(r) => &r.data.subpopulations,
            DomainConfig::Game(g) => &g.data.subpopulations,
        }
    }

    pub fn fixed_budgets(&self) -> Vec<u32> {
        let explicit = match self {
            DomainConfig::Maze(m) => &m.fixed_budgets,
            DomainConfig::Rsa(r) => &r.fixed_budgets,
            DomainConfig::Game(g) => &g.fixed_budgets,
        };
        explicit.clone().unwrap_or_else(|| self.grid().values().to_vec())
    }
}

impl ExperimentConfig {
    /// Parse and validate; schema errors carry the JSON path.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Schema { path: e.path().to_string(), msg: e.inner().to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Schema {
                path: "version".into(),
                msg: format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version),
            });
        }
        self.fit.validate()?;
        self.split.validate()?;
        let grid = self.domain.grid();
        if self.domain.subpopulations().is_empty() {
            return Err(Error::Config("at least one subpopulation is required".into()));
        }
        for b in self.domain.fixed_budgets() {
            if grid.position(b).is_none() {
                return Err(Error::Config(format!("fixed budget {b} is not on the grid {:?}", grid.values())));
            }
        }
        let temps = match &self.domain {
            DomainConfig::Maze(m) => &m.temps,
            DomainConfig::Rsa(r) => &r.temps,
            DomainConfig::Game(g) => &g.puct_betas,
        };
        if temps.is_empty() || temps.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::Config(format!("baseline grid must be nonempty, finite and >= 0, got {temps:?}")));
        }
        Ok(())
    }

    /// Built-in configuration for a domain: the desk-scale recovery runs.
    pub fn default_for(domain: Domain) -> Self {
        match domain {
            Domain::Maze => ExperimentConfig {
                version: CONFIG_VERSION,
                name: "maze_recovery".into(),
                seed: 1,
                domain: DomainConfig::Maze(MazeExperiment {
                    data: MazeDataConfig {
                        width: 15,
                        height: 15,
                        num_exits: 5,
                        num_mazes: 4,
                        rewards: vec![1.0, 2.0, 3.0, 4.0, 6.0],
                        grid: BudgetGrid::maze_default(),
                        subpopulations: point_masses(&[1, 2, 5, 10, 20]),
                        trajectories_per_subpop: 500,
                        max_steps: None,
                    },
                    temps: default_maze_temps(),
                    reach: ExitReach::Subtree,
                    fixed_budgets: None,
                }),
                fit: FitConfig {
                    optimizer: Optimizer::Adam,
                    learning_rate: 0.1,
                    max_iters: 500,
                    tolerance: 1e-12,
                    init_jitter: 0.1,
                    ..FitConfig::default()
                },
                split: SplitFractions::default(),
            },
            Domain::Rsa => ExperimentConfig {
                version: CONFIG_VERSION,
                name: "rsa_mixture".into(),
                seed: 1,
                domain: DomainConfig::Rsa(RsaExperiment {
                    data: RsaDataConfig {
                        vocab_utterances: 10,
                        vocab_referents: 8,
                        context_size: 5,
                        ambiguity: 0.5,
                        graded: true,
                        random_prior: true,
                        num_games: 50,
                        rounds_per_subpop: 10_000,
                        grid: BudgetGrid::rsa_default(),
                        subpopulations: vec![
                            vec![BudgetWeight { budget: 0, weight: 1.0 }],
                            vec![BudgetWeight { budget: 0, weight: 0.5 }, BudgetWeight { budget: 2, weight: 0.5 }],
                        ],
                    },
                    side: RsaSide::Speaker,
                    learn_lexicon: false,
                    temps: default_rsa_temps(),
                    fixed_budgets: None,
                }),
                fit: FitConfig { max_iters: 3000, tolerance: 1e-12, ..FitConfig::default() },
                split: SplitFractions::default(),
            },
            Domain::Game => ExperimentConfig {
                version: CONFIG_VERSION,
                name: "game_recovery".into(),
                seed: 1,
                domain: DomainConfig::Game(GameExperiment {
                    data: GameDataConfig {
                        grid: BudgetGrid::mcts_default(),
                        subpopulations: point_masses(&[4, 32, 256]),
                        records_per_subpop: 2000,
                        params: MctsParams::default(),
                    },
                    puct_betas: default_puct_betas(),
                    puct_budget: default_puct_budget(),
                    fixed_budgets: None,
                }),
                fit: FitConfig { max_iters: 3000, tolerance: 1e-12, ..FitConfig::default() },
                split: SplitFractions::default(),
            },
        }
    }
}
