//! Seed derivation. Every stochastic stage draws from its own ChaCha stream
//! keyed by (master seed, stream id), so stages can be reordered or skipped
//! without perturbing each other's randomness.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::num::Scalar;

/// Stable stream ids for the pipeline stages.
pub mod stream {
    pub const SYNTHETIC: u64 = 1;
    pub const EMBEDDING_INIT: u64 = 2;
    pub const EMBEDDING_NEGATIVES: u64 = 3;
    pub const GENERATOR_INIT: u64 = 4;
    pub const PRETRAIN_SHUFFLE: u64 = 5;
    pub const ROLLOUT: u64 = 6;
    pub const DM_INIT: u64 = 7;
    pub const DP_INIT: u64 = 8;
    pub const DISC_BATCHES: u64 = 9;
    pub const DISORDERED: u64 = 10;
    pub const HEAD_INIT: u64 = 11;
    pub const ENCODER_INIT: u64 = 12;
}

/// Deterministic RNG for one (seed, stream) pair.
pub fn rng_for(master_seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    rng
}

/// Matrix with entries uniform in [-scale, scale].
pub fn uniform_matrix<F: Scalar>(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        F::from_f64_lossy(rng.gen_range(-scale..=scale))
    })
}

/// Vector with entries uniform in [-scale, scale].
pub fn uniform_vector<F: Scalar>(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<F> {
    Array1::from_shape_fn(len, |_| F::from_f64_lossy(rng.gen_range(-scale..=scale)))
}

/// Standard-normal vector (Box-Muller; two uniforms per draw).
pub fn normal_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}
