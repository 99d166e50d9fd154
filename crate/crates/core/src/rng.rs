//! Reproducible counter-based random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A position in a ChaCha8 keystream: `(seed, counter)` fully determines every
/// subsequent draw, independent of platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent child stream keyed by `tag`. Does not advance `self`.
    pub fn fork(&self, tag: u64) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tag.wrapping_add(1));
        rng.set_word_pos(u128::from(self.counter));
        RngState::new(rng.next_u64())
    }

    /// Runs `f` against a generator positioned at this state, then stores the
    /// advanced counter.
    pub fn with<R>(&mut self, f: impl FnOnce(&mut ChaCha8Rng) -> R) -> R {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(u128::from(self.counter));
        let out = f(&mut rng);
        self.counter = rng.get_word_pos() as u64;
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.with(|r| r.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.with(|r| r.random::<f64>())
    }

    /// Uniform integer in `[0, n)`; `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.with(|r| r.random_range(0..n))
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        self.with(|r| StandardNormal.sample(r))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        self.with(|r| {
            for i in (1..items.len()).rev() {
                let j = r.random_range(0..=i);
                items.swap(i, j);
            }
        })
    }
}
