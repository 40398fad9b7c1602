//! Sub-seed derivation. Every random stream in a run is keyed by the root
//! seed and a purpose string so that adding a new consumer never shifts
//! the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First 8 bytes (little endian) of `SHA-256(root_le || purpose)`.
pub fn derive(root: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng(root: u64, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, purpose))
}
