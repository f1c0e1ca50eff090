//! Seed derivation. Every random stream in a run is a ChaCha8 stream keyed by
//! a base seed plus tags (client id, round, purpose), so no RNG state ever
//! needs to be persisted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Purpose tags.
pub mod tag {
    pub const PARTITION: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const PROBE: u64 = 3;
    pub const ALA: u64 = 4;
    pub const HOLDOUT: u64 = 5;
    pub const INIT: u64 = 6;
}
