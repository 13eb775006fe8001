//! Seeded random streams split by named purpose.
//!
//! Every consumer of randomness asks for its own stream, keyed by the run seed, a
//! purpose label (`"init"`, `"data"`, `"shuffle"`, ...) and an optional index. Streams are
//! independent of the order in which they are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str) -> Rng {
    indexed_stream(seed, purpose, 0)
}

pub fn indexed_stream(seed: u64, purpose: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
