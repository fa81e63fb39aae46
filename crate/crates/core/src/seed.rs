//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed off the master seed by
//! `derive(parent, stream, index)`, a SplitMix64 finalizer applied to the
//! parent and the two counters. Streams never share state, so results do not
//! depend on the order in which clients are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Distinct tags keep derived seeds from colliding.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const ROUND: u64 = 3;
    pub const SELECT: u64 = 4;
    pub const LOCAL: u64 = 5;
    pub const SWEEP: u64 = 6;
    pub const BASELINE: u64 = 7;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(parent: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(parent ^ stream.wrapping_mul(GOLDEN));
    splitmix64(a ^ splitmix64(index))
}

/// Seed of round `t` (1-based) for a run keyed by `master`.
pub fn round_seed(master: u64, t: u64) -> u64 {
    derive(master, stream::ROUND, t)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
