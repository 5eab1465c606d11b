//! Named random sub-streams derived from a single global seed.
//!
//! Every stage draws from its own stream (`catalog`, `clicks`, `training`,
//! `dpo-negatives`, ...) so that stages can be re-run independently and
//! still see the same randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from `(seed, stream, key)`.
pub fn derive(seed: u64, stream: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name, ""))
}

pub fn keyed(seed: u64, name: &str, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name, key))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
