use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Well-known stream identifiers so independent consumers of one seed never
/// overlap.
pub mod streams {
    pub const WEIGHTS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const CONTEXT_INIT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const SYNTH_TOKENS: u64 = 5;
    pub const SYNTH_NOISE: u64 = 6;
}

/// Counter-based pseudo-random generator fully determined by its seed.
///
/// Backed by ChaCha8, so the output is identical on every platform. Gaussian
/// draws consume exactly two uniforms each, which makes draw `i` a function of
/// `(seed, stream, i)` alone.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream of the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    /// Generator for a parallel worker: seed XOR worker index.
    pub fn for_worker(&self, worker: u64) -> Self {
        Self::new(self.seed ^ worker)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Box-Muller transform of two uniforms; the sine branch is discarded.
    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        mean + std * z
    }

    /// Uniform integer in `[0, upper)`.
    pub fn below(&mut self, upper: usize) -> usize {
        self.inner.gen_range(0..upper)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..length`, in sampled order.
    pub fn sample_indices(&mut self, length: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, length, amount).into_vec()
    }
}
