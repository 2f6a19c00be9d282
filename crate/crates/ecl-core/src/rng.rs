//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a [`ChaCha12Rng`] seeded through
//! [`mix_seed`], so runs are reproducible from a single root seed and results
//! do not depend on platform hasher state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags keep independent draw sites from sharing a stream.
pub mod stream {
    pub const MEANS: u64 = 0x01;
    pub const TRAIN_SAMPLES: u64 = 0x02;
    pub const TEST_SAMPLES: u64 = 0x03;
    pub const EXPERT_INIT: u64 = 0x04;
    pub const QUEUE_INIT: u64 = 0x05;
    pub const SHUFFLE: u64 = 0x06;
    pub const JITTER: u64 = 0x07;
    pub const LANDSCAPE: u64 = 0x08;
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix an arbitrary list of seed parts into one 64-bit seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x243F_6A88_85A3_08D3; // first digits of pi
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}

/// Deterministic generator for the given seed parts.
pub fn rng_from(parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix_seed(parts))
}
