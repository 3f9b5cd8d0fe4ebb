//! Seeded random streams.
//!
//! Every randomized routine draws from a ChaCha8 stream keyed by a SHA-256
//! digest of `(seed, domain, key)`, so results depend only on the seed and
//! the logical identity of the work item, never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type DpmRng = ChaCha8Rng;

/// Independent stream for `(seed, domain, key)`.
pub fn stream(seed: u64, domain: &str, key: &[u8]) -> DpmRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(key);
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn indexed_stream(seed: u64, domain: &str, index: u64) -> DpmRng {
    stream(seed, domain, &index.to_le_bytes())
}

pub fn customer_stream(seed: u64, domain: &str, customer_id: &str) -> DpmRng {
    stream(seed, domain, customer_id.as_bytes())
}

/// Hex SHA-256 of arbitrary bytes.
pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest: [u8; 32] = Sha256::digest(bytes).into();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
