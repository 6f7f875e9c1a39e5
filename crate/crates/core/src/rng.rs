//! Deterministic seed derivation for partitioned sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for an independent stream identified by `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}

/// Stream identifiers, kept distinct so subsystems never share random numbers.
pub mod streams {
    pub const PAIRS: u64 = 1;
    pub const PAIR_TIMES: u64 = 2;
    pub const SCENE: u64 = 3;
    pub const DETECT_SIGNAL: u64 = 4;
    pub const DETECT_IDLER: u64 = 5;
    pub const DARK: u64 = 6;
    pub const WINDOW_COUNT: u64 = 7;
    pub const PHANTOM: u64 = 8;
    pub const QE: u64 = 9;
}
