//! Keyed random streams.
//!
//! Every random draw in a search comes from a stream named by
//! `(seed, iteration, env)`, so the numbers an environment sees never depend on
//! which worker ran it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64, iteration: u64, env: u64) -> Stream {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16..24].copy_from_slice(&env.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit hash of a string tag and an index.
pub fn hash_key(tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update((tag.len() as u64).to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
