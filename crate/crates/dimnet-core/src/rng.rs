//! Deterministic RNG streams.
//!
//! Every stochastic component takes its randomness from a ChaCha stream
//! derived from `(base seed, purpose tag)`, so adding a consumer never shifts
//! the draws of another and identical seeds reproduce runs bit for bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// FNV-1a over the tag bytes; stable across platforms and releases, unlike
/// `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive an independent RNG stream for `tag` from a base seed.
pub fn stream(seed: u64, tag: &str) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).to_le_bytes());
    ChaCha20Rng::from_seed(key)
}
