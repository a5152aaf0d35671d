//! Deterministic random streams derived from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; spreads nearby inputs over the whole 64-bit range.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, purpose, index)`, e.g. the batch of one
/// training step. Depends on nothing else, so runs can resume mid-way.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(mix64(seed ^ mix64(purpose)) ^ index))
}

pub mod purpose {
    pub const IDENTITY: u64 = 1;
    pub const NUISANCE: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const EMBED_BATCH: u64 = 4;
    pub const SWAP_BATCH: u64 = 5;
    pub const EVAL_PAIRS: u64 = 6;
    pub const INIT: u64 = 7;
}
