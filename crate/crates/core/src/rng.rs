//! Seeded, label-addressed random streams.
//!
//! A stream is a ChaCha20 generator whose key is the SHA-256 digest of the
//! master seed (little-endian) followed by the UTF-8 label. Distinct labels
//! give statistically independent streams; identical `(seed, label)` pairs
//! give identical sequences on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub label: String,
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        Self {
            seed,
            label: label.into(),
        }
    }

    /// Derives a child stream, `label/suffix`.
    pub fn child(&self, suffix: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, suffix))
    }

    pub fn key(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.label.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        key
    }

    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key())
    }
}
