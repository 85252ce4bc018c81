//! Deterministic RNG streams derived from a single pipeline seed.
//!
//! Every randomized stage draws from its own ChaCha8 stream keyed by the
//! global seed, a purpose label, and optional indices. Streams are
//! independent of each other and of execution order, so parallel workers
//! can each derive their own stream and the overall result stays identical
//! to a sequential run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a generator for `(seed, label, indices)`.
///
/// The 256-bit stream key is the SHA-256 of the seed, the label, and the
/// index list, so distinct labels or indices can never collide.
pub fn stream(seed: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([label.len() as u8]);
    hasher.update(label.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}
