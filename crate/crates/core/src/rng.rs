//! Named random streams.
//!
//! Every random draw in the crate flows from a root seed through
//! `stream = hash(root, purpose, index)`, so adding a sweep cell or a worker
//! never perturbs the draws of another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derives a 64-bit seed for the stream `(root, purpose, index)`.
pub fn stream_seed(root: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// A generator for the named stream `(root, purpose, index)`.
pub fn stream(root: u64, purpose: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(stream_seed(root, purpose, index))
}

/// A generator seeded directly.
pub fn seeded(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
