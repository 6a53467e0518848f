//! Counter-based seeding so every draw has its own reproducible stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `(seed, stream, index)`.
pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

pub fn substream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

/// Stream tags, kept distinct so samplers never share randomness.
pub mod streams {
    pub const SWARM: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const FIT: u64 = 3;
    pub const SEARCH: u64 = 4;
    pub const TRUTH: u64 = 5;
    pub const MU: u64 = 6;
    pub const STUDY: u64 = 7;
}
