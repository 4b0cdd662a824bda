//! Counter-based seed derivation.
//!
//! Every random stream is keyed by `(master, stream, index)`, so the draws a
//! sample or step sees never depend on how work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are arbitrary but must never change.
pub mod stream {
    pub const BACKBONE: u64 = 0x01;
    pub const SPLIT_REPRESENTATION: u64 = 0x10;
    pub const SPLIT_VALIDATION: u64 = 0x11;
    pub const SPLIT_CLASSIFICATION: u64 = 0x12;
    pub const SPLIT_TEST: u64 = 0x13;
    pub const LABEL_SHUFFLE: u64 = 0x14;
    pub const GW_INIT: u64 = 0x20;
    pub const GW_STEP: u64 = 0x21;
    pub const PROBE_INIT: u64 = 0x30;
    pub const PROBE_STEP: u64 = 0x31;
    pub const PROBE_SHUFFLE: u64 = 0x32;
    pub const ATTENTION_INIT: u64 = 0x40;
    pub const ATTENTION_STEP: u64 = 0x41;
    pub const ATTENTION_SHUFFLE: u64 = 0x42;
    pub const EVAL: u64 = 0x50;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng(master: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
