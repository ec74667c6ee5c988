//! Deterministic random streams.
//!
//! Every stochastic component (initialization, shuffling, dropout, synthetic
//! data, split assignment) draws from its own ChaCha stream derived from the
//! run seed, so changing one consumer never perturbs the others.

pub use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_DROPOUT: u64 = 3;
pub const TAG_SYNTH: u64 = 4;
pub const TAG_SPLIT: u64 = 5;
pub const TAG_GRADCHECK: u64 = 6;

/// Derives an independent stream from a master seed and a purpose tag.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}
