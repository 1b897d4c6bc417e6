//! Named random sub-streams derived from one master seed.
//!
//! Every consumer of randomness (data generation, initialisation, TLP
//! sampling, batch draws) asks for its own stream by name plus a small
//! integer path. Streams never share state, so the order in which parallel
//! workers run cannot change what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Derives an independent generator for `(master, name, path)`.
pub fn stream(master: u64, name: &str, path: &[u64]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Stable 64-bit tag for a string, used to fold names into stream paths.
pub fn tag(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
