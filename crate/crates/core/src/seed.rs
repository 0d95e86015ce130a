//! Seed derivation. Every random stream in a run is keyed by
//! `(run seed, purpose, a, b)` so that streams never depend on how many draws
//! another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

// stream purposes
pub(crate) const INIT: u64 = 1;
pub(crate) const SAMPLE: u64 = 2;
pub(crate) const TRAIN: u64 = 3;
pub(crate) const DIRICHLET: u64 = 4;
pub(crate) const SHARDS: u64 = 5;
pub(crate) const SPLIT: u64 = 6;
pub(crate) const BLOBS: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn rng_for(seed: u64, purpose: u64, a: u64, b: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, a, b))
}
