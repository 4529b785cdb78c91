//! Reproducible noise generation.
//!
//! Every stochastic draw in the crate goes through [`NoiseState`], which is a
//! pure function of `(seed, counter)`: draw `k` is generated from an
//! independent ChaCha20 stream, so replaying a run from the same seed (or
//! restoring `(seed, counter)` from a checkpoint) reproduces the exact same
//! tensors regardless of how earlier draws were shaped or batched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseState {
    seed: u64,
    counter: u64,
}

impl NoiseState {
    pub fn new(seed: u64) -> Self {
        NoiseState { seed, counter: 0 }
    }

    /// Restore a state saved as `(seed, counter)`.
    pub fn restore(seed: u64, counter: u64) -> Self {
        NoiseState { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn next_rng(&mut self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.counter);
        self.counter += 1;
        rng
    }

    /// Standard-normal tensor of the given shape.
    pub fn normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut rng = self.next_rng();
        let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_vec(data, shape)
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn uniform_int(&mut self, lo: u32, hi: u32) -> u32 {
        let mut rng = self.next_rng();
        rng.random_range(lo..=hi)
    }

    /// Deterministic permutation of `0..n` keyed by this state's seed and an
    /// epoch tag; does not consume the draw counter.
    pub fn permutation(seed: u64, tag: u64, n: usize) -> Vec<usize> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(tag);
        let mut idx: Vec<usize> = (0..n).collect();
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// RNG for parameter initialization, independent of the sampling counter.
pub struct InitRng {
    rng: ChaCha20Rng,
}

impl InitRng {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // keep init draws off the noise streams
        rng.set_stream(u64::MAX);
        InitRng { rng }
    }

    pub fn normal_vec(&mut self, n: usize, std: f32) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let z: f32 = self.rng.sample(StandardNormal);
                z * std
            })
            .collect()
    }
}
