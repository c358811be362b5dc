//! Seed splitting.
//!
//! Every random stream in the crate is derived from one master seed and a
//! textual label: `derive_seed(master, label)` is the first eight bytes
//! (little-endian) of `SHA-256(master.to_le_bytes() || label)`. Streams are
//! therefore independent of evaluation order and of the thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(master: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(master, label))
}
