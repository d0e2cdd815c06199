//! Dataset directories: `meta.json`, `records.jsonl` (one trajectory,
//! round or position per line) and, for mazes, `mazes.json`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{DomainConfig, ExperimentConfig};
use super::Domain;
use crate::anytime::BudgetGrid;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::maze::{generate_maze_dataset, Maze, Trajectory};
use crate::mcts::{generate_game_dataset, GameRecord};
use crate::rsa::{generate_population, RsaRecord};

pub const DATASET_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub domain: Domain,
    pub seed: u64,
    pub num_subpops: usize,
    /// Lines in `records.jsonl`.
    pub num_records: usize,
    pub grid: BudgetGrid,
    /// Generator configuration the data came from.
    pub generator: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetBody {
    Maze { mazes: Vec<Maze>, trajectories: Vec<Trajectory> },
    Rsa { records: Vec<RsaRecord> },
    Game { records: Vec<GameRecord> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub body: DatasetBody,
}

impl Dataset {
    /// Run the domain's generator from an experiment config.
    pub fn generate(config: &ExperimentConfig, exec: Execution) -> Result<Dataset> {
        let seed = config.seed;
        let (body, num_subpops, grid, generator) = match &config.domain {
            DomainConfig::Maze(m) => {
                let ds = generate_maze_dataset(&m.data, seed, exec)?;
                let n = ds.num_subpops;
                (
                    DatasetBody::Maze { mazes: ds.mazes, trajectories: ds.trajectories },
                    n,
                    ds.grid,
                    serde_json::to_value(&m.data)?,
                )
            }
            DomainConfig::Rsa(r) => {
                let pop = generate_population(&r.data, seed)?;
                (
                    DatasetBody::Rsa { records: pop.records },
                    r.data.subpopulations.len(),
                    r.data.grid.clone(),
                    serde_json::to_value(&r.data)?,
                )
            }
            DomainConfig::Game(g) => {
                let ds = generate_game_dataset(&g.data, seed, exec)?;
                let n = ds.num_subpops;
                (DatasetBody::Game { records: ds.records }, n, ds.grid, serde_json::to_value(&g.data)?)
            }
        };
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT,
            domain: config.domain.domain(),
            seed,
            num_subpops,
            num_records: 0,
            grid,
            generator,
        };
        let mut ds = Dataset { meta, body };
        ds.meta.num_records = ds.num_units();
        ds.validate()?;
        Ok(ds)
    }

    /// Trajectories for mazes, records otherwise: the unit that is split.
    pub fn num_units(&self) -> usize {
        match &self.body {
            DatasetBody::Maze { trajectories, .. } => trajectories.len(),
            DatasetBody::Rsa { records } => records.len(),
            DatasetBody::Game { records } => records.len(),
        }
    }

    /// Subpopulation of each unit.
    pub fn strata(&self) -> Vec<usize> {
        match &self.body {
            DatasetBody::Maze { trajectories, .. } => trajectories.iter().map(|t| t.subpop_id).collect(),
            DatasetBody::Rsa { records } => records.iter().map(|r| r.subpop_id).collect(),
            DatasetBody::Game { records } => records.iter().map(|r| r.subpop_id).collect(),
        }
    }

    /// Legal actions everywhere and subpopulation ids dense from 0.
    pub fn validate(&self) -> Result<()> {
        let strata = self.strata();
        let mut seen = vec![false; self.meta.num_subpops];
        for (i, &s) in strata.iter().enumerate() {
            match seen.get_mut(s) {
                Some(x) => *x = true,
                None => {
                    return Err(Error::Data {
                        record: i,
                        msg: format!("subpopulation {s} outside 0..{}", self.meta.num_subpops),
                    })
                }
            }
        }
        if !strata.is_empty() {
            if let Some(s) = seen.iter().position(|x| !x) {
                return Err(Error::Data {
                    record: 0,
                    msg: format!("subpopulation ids are not dense: {s} has no records"),
                });
            }
        }
        match &self.body {
            DatasetBody::Maze { mazes, trajectories } => {
                for m in mazes {
                    m.validate()?;
                }
                for (i, t) in trajectories.iter().enumerate() {
                    let maze = mazes.get(t.maze_id).ok_or_else(|| Error::Data {
                        record: i,
                        msg: format!("maze {} outside 0..{}", t.maze_id, mazes.len()),
                    })?;
                    for st in &t.steps {
                        if !maze.contains(st.cell)
                            || maze.is_exit(st.cell)
                            || maze.neighbor(st.cell, st.action).is_none()
                        {
                            return Err(Error::Data {
                                record: i,
                                msg: format!("action {:?} is illegal at {:?}", st.action, st.cell),
                            });
                        }
                    }
                }
            }
            DatasetBody::Rsa { records } => {
                for (i, r) in records.iter().enumerate() {
                    let game = r.game().map_err(|e| Error::Data { record: i, msg: e.to_string() })?;
                    if r.target_index >= game.num_targets()
                        || r.utterance_index >= game.num_utterances()
                        || game.lexicon[[r.utterance_index, r.target_index]] <= 0.0
                    {
                        return Err(Error::Data {
                            record: i,
                            msg: format!("utterance {} cannot refer to target {}", r.utterance_index, r.target_index),
                        });
                    }
                }
            }
            DatasetBody::Game { records } => {
                for (i, r) in records.iter().enumerate() {
                    if !r.state.legal_actions().contains(&r.action_index) {
                        return Err(Error::Data {
                            record: i,
                            msg: format!("move {} is illegal in {}", r.action_index, r.state),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        match &self.body {
            DatasetBody::Maze { mazes, trajectories } => {
                std::fs::write(dir.join("mazes.json"), serde_json::to_string(mazes)? + "\n")?;
                write_jsonl(&dir.join("records.jsonl"), trajectories)
            }
            DatasetBody::Rsa { records } => write_jsonl(&dir.join("records.jsonl"), records),
            DatasetBody::Game { records } => write_jsonl(&dir.join("records.jsonl"), records),
        }
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("meta.json"))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let meta: DatasetMeta = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Schema { path: format!("meta.json:{}", e.path()), msg: e.inner().to_string() })?;
        if meta.format_version != DATASET_FORMAT {
            return Err(Error::Schema {
                path: "meta.json:format_version".into(),
                msg: format!("unsupported dataset format {}", meta.format_version),
            });
        }
        let records = dir.join("records.jsonl");
        let body = match meta.domain {
            Domain::Maze => {
                let mazes: Vec<Maze> = serde_json::from_str(&std::fs::read_to_string(dir.join("mazes.json"))?)?;
                DatasetBody::Maze { mazes, trajectories: read_jsonl(&records)? }
            }
            Domain::Rsa => DatasetBody::Rsa { records: read_jsonl(&records)? },
            Domain::Game => DatasetBody::Game { records: read_jsonl(&records)? },
        };
        let ds = Dataset { meta, body };
        if ds.num_units() != ds.meta.num_records {
            return Err(Error::Data {
                record: ds.num_units(),
                msg: format!("meta.json promises {} records, found {}", ds.meta.num_records, ds.num_units()),
            });
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| Error::Data { record: i, msg: e.to_string() })?);
    }
    Ok(items)
}
