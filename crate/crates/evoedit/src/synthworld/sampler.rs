//! Task-balanced stream of triplets.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::triplet::{make_triplet, EditTriplet};
use super::{EditTask, TaskDistribution};

/// Triplet seeds reserved for training data.
pub const TRAIN_SEEDS: Range<u64> = 0..1 << 31;
/// Triplet seeds reserved for evaluation; disjoint from [`TRAIN_SEEDS`].
pub const EVAL_SEEDS: Range<u64> = 1 << 31..1 << 32;

/// Infinite, deterministic stream of triplets whose task frequencies follow
/// a [`TaskDistribution`].
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    rng: ChaCha8Rng,
    cdf: [f64; 11],
    resolution: usize,
    seeds: Range<u64>,
}

pub fn balanced_sampler(distribution: &TaskDistribution, seed: u64) -> BalancedSampler {
    let mut cdf = [0.0; 11];
    let mut acc = 0.0;
    for (c, s) in cdf.iter_mut().zip(distribution.shares()) {
        acc += s;
        *c = acc;
    }
    BalancedSampler {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cdf,
        resolution: 32,
        seeds: TRAIN_SEEDS,
    }
}

impl BalancedSampler {
    pub fn resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    /// Restricts triplet seeds to `range`, e.g. to keep training and
    /// evaluation data apart.
    pub fn seed_range(mut self, range: Range<u64>) -> Self {
        assert!(!range.is_empty());
        self.seeds = range;
        self
    }

    pub fn next_task(&mut self) -> EditTask {
        let u: f64 = self.rng.random();
        let i = self.cdf.iter().position(|&c| u < c).unwrap_or_else(|| {
            // Rounding can leave the last cumulative share a hair below 1.
            self.cdf.iter().rposition(|&c| c > 0.0).unwrap_or(10)
        });
        EditTask::ALL[i]
    }

    /// Next `(task, seed)` pair without rendering anything.
    pub fn next_spec(&mut self) -> (EditTask, u64) {
        let task = self.next_task();
        let seed = self.rng.random_range(self.seeds.clone());
        (task, seed)
    }
}

impl Iterator for BalancedSampler {
    type Item = EditTriplet;

    fn next(&mut self) -> Option<EditTriplet> {
        let (task, mut seed) = self.next_spec();
        loop {
            if let Ok(t) = make_triplet(seed, task, self.resolution) {
                return Some(t);
            }
            seed = self.rng.random_range(self.seeds.clone());
        }
    }
}
