//! Seeded generators. Every random draw in the crate goes through a
//! `ChaCha8Rng` so that a seed fully determines a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for a base seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of `seed`. Streams of the same seed never
/// overlap, so replicates and pipeline stages can draw in any order.
pub fn split(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
