//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a master seed mixed with a stream label, so results never
//! depend on thread scheduling or call order across independent streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a stream label.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix64(seed ^ mix64(label))
}

pub fn stream(seed: u64, label: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, label))
}

/// Stream for one element of a nested loop, e.g. `(epoch, item)`.
pub fn keyed(seed: u64, label: u64, keys: &[u64]) -> Rng {
    let s = keys.iter().fold(derive(seed, label), |acc, &k| derive(acc, k));
    Rng::seed_from_u64(s)
}

/// Well-known stream labels so that unrelated consumers never share a seed.
pub mod labels {
    pub const SLIDE: u64 = 0x51_1DE;
    pub const NOISE: u64 = 0x0_015E;
    pub const INIT: u64 = 0x1_417;
    pub const SHUFFLE: u64 = 0x5_4FF1E;
    pub const SAMPLE: u64 = 0x5A_3E1E;
    pub const AUG_STUDENT: u64 = 0xA_0650;
    pub const AUG_TEACHER: u64 = 0xA_0651;
    pub const DROPOUT: u64 = 0xD_0;
    pub const SPLIT: u64 = 0x5_B117;
}
