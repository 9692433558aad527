//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `seed ⊕ tag`; distinct tags give unrelated streams.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Stream tags used across the crate.
pub mod tags {
    pub const WORLD: u64 = 1;
    pub const TRAIN_SAMPLES: u64 = 2;
    pub const HELD_OUT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const EPOCH: u64 = 5;
    pub const BOXES: u64 = 6;
    pub const GRAD_CHECK: u64 = 7;
}
