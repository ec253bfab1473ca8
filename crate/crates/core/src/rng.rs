//! Seed derivation.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! `(seed, tag, index)`. Work items (a worker, a pair, a spectator) get their
//! own stream, so results do not depend on iteration order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod tag {
    pub const EFFORT: u64 = 0x01;
    pub const PAIRING: u64 = 0x02;
    pub const MATCH: u64 = 0x03;
    pub const ADVANTAGE: u64 = 0x04;
    pub const SPECTATOR: u64 = 0x05;
    pub const DESIGN: u64 = 0x06;
    pub const SESSION_SEED: u64 = 0x07;
    pub const CDF: u64 = 0x08;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag and an index into a new 64-bit seed.
pub fn derive(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag.wrapping_mul(0xA24B_AED4_963E_E407))) ^ index)
}

pub fn stream(seed: u64, tag: u64, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive(seed, tag, index))
}
