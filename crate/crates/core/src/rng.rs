//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness (data generation, weight init, shuffling,
//! k-means, search) asks for its own stream so that changing one stage never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derive a 64-bit seed from a parent seed, a stream name and an index.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}
