//! Keyed random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 stream whose seed is
//! `SHA-256(master_seed_le || key)[..8]` read as a little-endian `u64`. Keys are
//! stable strings such as `"speaker/spk003"` or `"select/spk003-007"`, so a
//! draw depends only on what it is for, never on execution order or thread
//! count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn keyed_rng(master: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, key))
}
