//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a path of stream labels. Different
/// paths give statistically independent seeds.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream labels used across the crate so that seed streams never collide.
pub mod stream {
    pub const TRAIN: u64 = 1;
    pub const HELD_OUT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const LABELS: u64 = 4;
    pub const SWEEP: u64 = 5;
    pub const SIZES: u64 = 6;
    pub const GA: u64 = 7;
    pub const RANDOM_ALLOC: u64 = 8;
    pub const MLP_FILL: u64 = 9;
    pub const INIT: u64 = 10;
}
