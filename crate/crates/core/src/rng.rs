//! Seed derivation for independent, reproducible random streams.
//!
//! Every random draw in the platform comes from a ChaCha stream whose seed is
//! derived from the run's master seed plus a fixed list of tags (stage, tick,
//! user id, cell id, ...). Adding a user or gating a stage therefore never
//! shifts the draws of any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags used as the first derivation component.
pub mod stage {
    pub const MOBILITY_INIT: u64 = 0x4d4f_4249_0001;
    pub const MOBILITY: u64 = 0x4d4f_4249_0002;
    pub const SERVICE: u64 = 0x5345_5256_0001;
    pub const SHADOWING: u64 = 0x5348_4144_0001;
    pub const SMALL_SCALE: u64 = 0x534d_414c_0001;
    pub const TRAFFIC: u64 = 0x5452_4146_0001;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`. Order matters.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
