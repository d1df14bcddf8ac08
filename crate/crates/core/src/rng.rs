//! Seed plumbing. Every random draw in the crate comes from a ChaCha stream
//! keyed by a root seed and a purpose label, so runs replay bit-exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a purpose label.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Derives a child seed from `seed` and an index (grid cells, restarts).
pub fn indexed_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, label))
}
