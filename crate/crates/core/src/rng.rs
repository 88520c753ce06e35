//! Deterministic random streams derived from a global seed and integer tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes a seed with tags into a single 64-bit stream key.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

/// Stream purposes, used as the first tag so unrelated consumers never collide.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const LATENT_INIT: u64 = 2;
    pub const LANGEVIN: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const REPARAM: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const NOISE: u64 = 7;
}
