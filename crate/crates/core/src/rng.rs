//! Seed plumbing. Every stochastic choice in the crate draws from a
//! [`ChaCha8Rng`] derived from one user-facing 64-bit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under `seed`.
pub fn derive(seed: u64, purpose: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Sub-seed for a named purpose, for APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use rand::RngCore;
    derive(seed, purpose).next_u64()
}
