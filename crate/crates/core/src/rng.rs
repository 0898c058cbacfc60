//! Seeded RNG streams.
//!
//! Every run owns one logical generator identified by its seed; distinct
//! purposes draw from disjoint ChaCha streams so that, e.g., changing the
//! batch size never perturbs the weight initialization.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dense weight draws during initialization.
pub const STREAM_WEIGHTS: u64 = 0;
/// Bernoulli mask draws during initialization.
pub const STREAM_MASKS: u64 = 1;
/// Minibatch index draws during training.
pub const STREAM_BATCHES: u64 = 2;
/// Synthetic dataset generation.
pub const STREAM_DATA: u64 = 3;
/// Train/eval split shuffling.
pub const STREAM_SPLIT: u64 = 4;

/// A generator for `(seed, stream)`, reproducible across runs and platforms.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
