//! Seeded randomness. Every stochastic operation takes an explicit seed;
//! sub-streams are derived by hashing, never by sharing a generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(stream, index)` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

/// Stream tags used by the samplers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const ANCESTRAL: u64 = 2;
    pub const MONTE_CARLO: u64 = 3;
    pub const BACKGROUND: u64 = 4;
    pub const RESAMPLE: u64 = 5;
    pub const PLACEMENT: u64 = 6;
}

pub fn standard_normal(rng: &mut Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}
