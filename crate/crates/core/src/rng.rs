//! Seed derivation. Every stochastic step draws from its own ChaCha stream so
//! that adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(seed, domain, stream)`.
pub fn stream(seed: u64, domain: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

pub const PHANTOM: u64 = 1;
pub const SPLIT: u64 = 2;
pub const CORRUPT_SELECT: u64 = 3;
pub const CORRUPT_EDIT: u64 = 4;
pub const SHUFFLE: u64 = 5;
pub const INIT: u64 = 6;
