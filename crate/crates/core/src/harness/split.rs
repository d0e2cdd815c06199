use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

const STREAM_SPLIT: u64 = 41;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.valid, self.test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be nonnegative and sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// Sorted item indices per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }
}

/// Shuffle each stratum with its own seeded stream and cut it by the
/// fractions, so every split sees every stratum that is large enough.
pub fn stratified_split(strata: &[usize], fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    let groups = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); groups];
    for (i, &s) in strata.iter().enumerate() {
        members[s].push(i);
    }
    let mut split = Split::default();
    for (s, mut idx) in members.into_iter().enumerate() {
        idx.shuffle(&mut rng_for(seed, STREAM_SPLIT, s as u64));
        let n = idx.len() as f64;
        let n_valid = ((n * fractions.valid).round() as usize).min(idx.len());
        let n_test = ((n * fractions.test).round() as usize).min(idx.len() - n_valid);
        split.valid.extend_from_slice(&idx[..n_valid]);
        split.test.extend_from_slice(&idx[n_valid..n_valid + n_test]);
        split.train.extend_from_slice(&idx[n_valid + n_test..]);
    }
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}
