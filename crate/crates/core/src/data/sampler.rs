//! Importance-weighted sampling across a mixture of datasets.

use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub path: PathBuf,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

impl MixtureSpec {
    pub fn uniform(paths: impl IntoIterator<Item = PathBuf>) -> Self {
        MixtureSpec { entries: paths.into_iter().map(|path| MixtureEntry { path, weight: 1.0 }).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("mixture has no datasets"));
        }
        if let Some(e) = self.entries.iter().find(|e| !(e.weight > 0.0) || !e.weight.is_finite()) {
            return Err(Error::config(format!("weight for {} must be positive, got {}", e.path.display(), e.weight)));
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.weight).collect()
    }

    /// `P_k = w_k / Σ_j w_j`.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        self.entries.iter().map(|e| e.weight / total).collect()
    }
}

/// Sampling extent of one dataset: trajectories available to the sampler
/// and valid window starts per trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetExtent {
    pub trajectories: usize,
    pub starts: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub dataset: usize,
    pub trajectory: usize,
    pub start: usize,
}

/// Infinite, seed-reproducible stream of `(dataset, trajectory, start)`.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    index: Option<WeightedIndex<f64>>,
    extents: Vec<DatasetExtent>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(weights: &[f64], extents: &[DatasetExtent], seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("empty mixture"));
        }
        if weights.len() != extents.len() {
            return Err(Error::contract("one extent per mixture weight required"));
        }
        if let Some(e) = extents.iter().find(|e| e.trajectories == 0 || e.starts == 0) {
            return Err(Error::config(format!("dataset extent must be non-empty, got {e:?}")));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("mixture weights must be positive"));
        }
        let index = if weights.len() == 1 {
            None
        } else {
            Some(WeightedIndex::new(weights).map_err(|e| Error::config(e.to_string()))?)
        };
        Ok(BalancedSampler { index, extents: extents.to_vec(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    /// `(seed, word position)` of the underlying generator.
    pub fn rng_state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    pub fn restore_rng(&mut self, seed: [u8; 32], word_pos: u128) {
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_word_pos(word_pos);
    }
}

impl Iterator for BalancedSampler {
    type Item = Draw;

    fn next(&mut self) -> Option<Draw> {
        let dataset = match &self.index {
            Some(idx) => idx.sample(&mut self.rng),
            None => 0,
        };
        let ext = self.extents[dataset];
        let trajectory = self.rng.random_range(0..ext.trajectories);
        let start = self.rng.random_range(0..ext.starts);
        Some(Draw { dataset, trajectory, start })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXT: DatasetExtent = DatasetExtent { trajectories: 5, starts: 3 };

    fn frequencies(weights: &[f64], draws: usize, seed: u64) -> Vec<f64> {
        let s = BalancedSampler::new(weights, &vec![EXT; weights.len()], seed).unwrap();
        let mut counts = vec![0usize; weights.len()];
        for d in s.take(draws) {
            counts[d.dataset] += 1;
            assert!(d.trajectory < EXT.trajectories && d.start < EXT.starts);
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn equal_weights_split_evenly() {
        let f = frequencies(&[1.0, 1.0], 10_000, 17);
        assert!((f[0] - 0.5).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn two_to_one_weights() {
        let f = frequencies(&[2.0, 1.0], 10_000, 23);
        assert!((f[0] - 2.0 / 3.0).abs() < 0.02 && (f[1] - 1.0 / 3.0).abs() < 0.02, "{f:?}");
    }

    #[test]
    fn single_dataset_always_chosen() {
        assert_eq!(frequencies(&[0.3], 500, 1), vec![1.0]);
        let m = MixtureSpec::uniform([PathBuf::from("a")]);
        assert_eq!(m.probabilities(), vec![1.0]);
    }

    #[test]
    fn stream_is_reproducible_and_restorable() {
        let mut a = BalancedSampler::new(&[1.0, 3.0], &[EXT, EXT], 5).unwrap();
        let b = BalancedSampler::new(&[1.0, 3.0], &[EXT, EXT], 5).unwrap();
        let first: Vec<Draw> = a.by_ref().take(50).collect();
        assert_eq!(first, b.clone().take(50).collect::<Vec<_>>());
        let (seed, pos) = a.rng_state();
        let next: Vec<Draw> = a.clone().take(20).collect();
        let mut c = b;
        c.restore_rng(seed, pos);
        assert_eq!(next, c.take(20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_mixture_is_config_error() {
        assert!(matches!(BalancedSampler::new(&[], &[], 0), Err(Error::Config(_))));
        assert!(MixtureSpec::default().validate().is_err());
    }
}
