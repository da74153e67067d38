//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream whose seed is derived from the run seed and a fixed label, so
//! stages can be re-run independently and still agree bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

pub fn derive_label(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(mix(seed), |acc, b| mix(acc ^ u64::from(b)))
}

pub fn stream(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
