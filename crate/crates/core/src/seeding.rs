//! Portable seed derivation.
//!
//! Every random stream is a ChaCha8 generator seeded from a base seed mixed
//! with a path of indices (episode, batch slot, trial, ...), so streams are
//! independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Name of the generator behind every stream.
pub const RNG_ALGORITHM: &str = "chacha8";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `base`.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x5851_f42d_4c95_7f2d))))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(base: u64, path: &[u64]) -> ChaCha8Rng {
    rng(derive(base, path))
}
