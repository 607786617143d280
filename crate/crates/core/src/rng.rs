//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream. Streams for
//! independent work items are derived from a root seed and a path of
//! integers (epoch, shape index, purpose tag, ...) so that the order in
//! which work items are processed never changes what each one draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of integers into a 64-bit stream key.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for `path` under `seed`, e.g. `derive(seed, &[epoch, shape, tag::VIEW])`.
pub fn derive(seed: u64, path: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_key(seed, path))
}

/// Purpose tags used as the last path element.
pub mod tag {
    pub const BANK_VIEW: u64 = 1;
    pub const ANCHOR: u64 = 2;
    pub const POSITIVE: u64 = 3;
    pub const NEGATIVE: u64 = 4;
    pub const NEGATIVE_PICK: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const CLUSTER: u64 = 7;
    pub const INIT: u64 = 8;
    pub const AUGMENT: u64 = 9;
    pub const PROTOTYPE: u64 = 10;
    pub const GENERATE: u64 = 11;
    pub const EVAL: u64 = 12;
    pub const PATCH: u64 = 13;
    pub const POISSON: u64 = 14;
}
