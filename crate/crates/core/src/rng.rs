//! Seeded random number generation.
//!
//! ChaCha8 gives a stream that is stable across platforms and crate
//! releases, unlike `StdRng`.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Derive an independent seed for a numbered sub-task (round, client, ...).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = master ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
