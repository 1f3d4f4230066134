//! Seed derivation for the many independent random streams of a run.
//!
//! Every source of randomness (data synthesis, partition draws, weight
//! init, epoch shuffles, participation) gets its own ChaCha stream keyed
//! by a domain tag plus context indices, so adding clients or rounds
//! never perturbs the streams of existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keeping unrelated streams apart.
pub mod domain {
    pub const DATASET: u64 = 0xD473;
    pub const PARTITION: u64 = 0x9A27;
    pub const MODEL_INIT: u64 = 0x301D;
    pub const TRAIN: u64 = 0x7214;
    pub const SELECT: u64 = 0x5E1E;
    pub const SPLIT: u64 = 0x591F;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an arbitrary tuple of seed parts into one 64-bit stream key.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C909;
    for &p in parts {
        h = splitmix64(h ^ p);
    }
    h
}

/// Deterministic generator for the stream identified by `parts`.
pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}
