//! Named deterministic random streams.
//!
//! Every source of randomness in a run is a separate ChaCha stream keyed by
//! `(seed, purpose)`. Drawing more data from one stream never shifts another,
//! so adding a diagnostic that consumes randomness cannot change the training
//! trajectory of an existing configuration.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a label, used to key streams by purpose name.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic RNG for one named purpose under a base seed.
///
/// The 256-bit ChaCha key is derived by chaining splitmix64 from
/// `mix(seed, hash(purpose))`, so distinct purposes give independent streams.
pub fn stream(seed: u64, purpose: &str) -> ChaCha8Rng {
    let mut state = mix64(seed ^ mix64(hash_label(purpose)));
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = mix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a per-run seed from a campaign seed and run index.
///
/// Used when a campaign needs more runs than configured seeds; mixing the
/// index keeps derived seeds distinct.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    mix64(base ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}
