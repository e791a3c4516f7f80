//! Seed derivation.
//!
//! Every random stream comes from one master seed split by a subsystem
//! label: the sub-seed is the first 8 bytes (little endian) of
//! `sha256(master_le_bytes || label)`, fed to ChaCha20.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

pub const DEFAULT_SEED: u64 = 7;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(master: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, label))
}
