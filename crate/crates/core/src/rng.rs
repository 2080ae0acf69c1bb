//! Seeded random streams.
//!
//! Every random draw in the crate comes from [`SimRng`], a ChaCha8
//! generator (counter-based: the output at position `n` depends only on
//! the key and `n`). A 64-bit seed is expanded into the key with
//! `seed_from_u64`. Independent streams are derived with [`derive_seed`]
//! so that a worker's randomness depends only on its own seed, never on
//! how many workers exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer over `base + stream * golden`.
///
/// Used for auto-reset seed schedules (`stream` = episode counter), CEM
/// member seeds, and per-trial seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
