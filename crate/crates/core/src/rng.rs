//! Seeded random streams.
//!
//! Every stochastic step in the pipeline draws from an [`RngStream`]. Streams
//! are ChaCha8 generators addressed by `(seed, stream index)`, so work that is
//! split across threads can derive the same substream a serial run would use.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Independent stream `index` under `seed`.
    pub fn substream(seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        Self {
            seed,
            rng,
            draws: 0,
        }
    }

    /// Substream of this stream's seed; does not advance `self`.
    pub fn derive(&self, index: u64) -> Self {
        Self::substream(self.seed, index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of sampling calls made on this stream. Each call counts once,
    /// regardless of how many values it produced.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn normal_vec<F: num_traits::Float>(&mut self, n: usize) -> Vec<F> {
        self.draws += 1;
        (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                F::from(z).unwrap()
            })
            .collect()
    }

    pub fn normal(&mut self) -> f64 {
        self.draws += 1;
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in the closed range `[lo, hi]`.
    pub fn int_in(&mut self, lo: usize, hi: usize) -> usize {
        self.draws += 1;
        self.rng.random_range(lo..=hi)
    }

    /// Uniform real in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.draws += 1;
        if hi <= lo {
            return lo;
        }
        self.rng.random_range(lo..hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.draws += 1;
        self.rng.random::<f64>() < p
    }

    /// `amount` distinct indices from `0..len`, uniformly without replacement.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        self.draws += 1;
        index::sample(&mut self.rng, len, amount).into_vec()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        self.draws += 1;
        items.shuffle(&mut self.rng);
    }
}
