//! Seed derivation helpers. Every stochastic component takes an explicit
//! seed and derives per-item streams with a splitmix step, so outputs are
//! pure functions of (spec, seed).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a seed with a stream tag, splitmix64-style.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic generator for a (seed, tag) stream.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}
