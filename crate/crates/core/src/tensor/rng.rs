use rand::{Rng, SeedableRng};
use rand_distr::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dense::Tensor;

/// Name recorded in checkpoints for the generator behind [`RngState`].
pub const RNG_ALGORITHM: &str = "chacha8";

/// Seeded ChaCha8 stream. Identical seed and call sequence give identical samples.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for a named purpose, derived from `seed`.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    /// Position in the ChaCha block stream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn stream(&self) -> u64 {
        self.inner.get_stream()
    }

    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        RngState { seed, inner }
    }

    pub fn standard_normal(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| self.inner.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_vec(rows, cols, data).expect("shape")
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        self.standard_normal(rows, cols).scaled(std)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Entries drawn uniformly from `[0, 1)`.
    pub fn uniform_tensor(&mut self, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| self.uniform()).collect();
        Tensor::from_vec(rows, cols, data).expect("shape")
    }

    /// One draw from an arbitrary distribution.
    pub fn sample<D: Distribution<f64>>(&mut self, dist: &D) -> f64 {
        dist.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

/// `shape`-sized tensor of i.i.d. standard normal draws.
pub fn sample_standard_normal(rng: &mut RngState, rows: usize, cols: usize) -> Tensor {
    rng.standard_normal(rows, cols)
}
