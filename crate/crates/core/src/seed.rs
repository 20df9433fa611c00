//! Seed derivation. Every random draw in the crate is keyed off a base seed
//! mixed with stream tags, so results never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from `base` and a sequence of tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

/// Stream tags, one per consumer.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const MATCHING: u64 = 4;
    pub const DROP_PATH: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const MASK_RGB: u64 = 7;
    pub const MASK_DEPTH: u64 = 8;
    pub const DATA: u64 = 9;
    pub const HEAD_INIT: u64 = 10;
}
