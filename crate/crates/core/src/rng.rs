//! Seeded randomness.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] stream (a
//! counter-based generator) seeded from an explicit `u64`. Child seeds are
//! derived with [`derive_seed`], which mixes the parent seed, a role string
//! and an index through FNV-1a and the SplitMix64 finalizer. Distinct
//! `(role, index)` pairs give statistically independent streams without the
//! caller keeping any seed bookkeeping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(parent, role, index)`.
pub fn derive_seed(parent: u64, role: &str, index: u64) -> u64 {
    let r = splitmix64(fnv1a(role.as_bytes()));
    splitmix64(splitmix64(parent ^ r).wrapping_add(splitmix64(index ^ 0x5851_f42d_4c95_7f2d)))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
