//! Seeded random streams.
//!
//! Every stochastic consumer draws from its own stream derived from the run
//! seed plus a path of integer keys, e.g. `(SHUFFLE, epoch)` or
//! `(ATTACK, epoch, batch)`. Derivation folds each key into the seed with the
//! SplitMix64 finalizer; the folded value seeds a ChaCha8 generator. Streams
//! with different key paths are statistically independent, and adding a new
//! consumer never perturbs the draws of an existing one.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream tags used by the training and evaluation pipeline.
pub mod stream {
    pub const SHUFFLE: u64 = 1;
    pub const ATTACK: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const INIT: u64 = 4;
    pub const DATA_TRAIN: u64 = 5;
    pub const DATA_TEST: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const HOOK_AS: u64 = 8;
    pub const HOOK_DA: u64 = 9;
    pub const HOOK_VERIFY: u64 = 10;
    pub const TRADES: u64 = 11;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for the key path `keys`. Depends only on the seed of
    /// `self`, not on how many values have already been drawn.
    pub fn derive(&self, keys: &[u64]) -> Rng {
        let mut s = splitmix64(self.seed);
        for &k in keys {
            s = splitmix64(s ^ splitmix64(k.wrapping_add(0xA076_1D64_78BD_642F)));
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f32 {
        self.inner.random::<f32>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f32 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f32) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher–Yates, high to low.
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
