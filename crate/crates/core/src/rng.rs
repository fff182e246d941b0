//! Deterministic seeding helpers.
//!
//! Every randomized operation takes a named 64-bit seed and builds its own
//! counter-based generator from it; there is no global RNG state anywhere in
//! the crate. Sub-streams (per sweep cell, per epoch, ...) are derived by
//! mixing the parent seed with a stream tag, so two streams with different
//! tags are independent and reordering one never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds the generator for one operation from its seed.
pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds the generator for a tagged sub-stream of `seed`.
pub fn substream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// SplitMix64 finalizer over (seed, tag); collision-free enough for stream
/// derivation and stable across platforms.
pub fn mix(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
