//! Seed-derived independent random streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_GOAL: u64 = 0;
pub const STREAM_RENDER: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_TRAIN: u64 = 4;
pub const STREAM_POLICY: u64 = 5;
pub const STREAM_EVAL: u64 = 6;
pub const STREAM_SCORE: u64 = 7;

/// Offset between a run seed and the seed of its held-out expert corpus.
pub const HELDOUT_SALT: u64 = 0x5EED_0000_0000;

/// A ChaCha8 generator for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
