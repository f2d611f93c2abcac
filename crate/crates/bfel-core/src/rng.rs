//! Seed derivation for reproducible runs.
//!
//! Every random decision in a federation run draws from a stream derived from
//! the single run seed, a purpose label, and zero or more indices (worker id,
//! round, ...). Streams are domain-separated by hashing, so adding a new
//! consumer never perturbs existing ones.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Deterministic RNG stream for `(seed, label, parts)`.
pub fn derive_rng(seed: u64, label: &str, parts: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive_key(seed, label, parts))
}

/// 32-byte key for `(seed, label, parts)`; also used for simulated secrets.
pub fn derive_key(seed: u64, label: &str, parts: &[u64]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"bfel.stream");
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u32).to_le_bytes());
    hasher.update(label.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    hasher.finalize().into()
}
