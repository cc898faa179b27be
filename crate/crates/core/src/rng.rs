//! Keyed random streams: each `(seed, domain, index)` triple gets its own
//! ChaCha stream, so any stream can be regenerated without replaying others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub mod domain {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const EXPORT: u64 = 5;
    pub const VERIFY: u64 = 6;
}

pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"dmps-rng");
    ChaCha8Rng::from_seed(key)
}
