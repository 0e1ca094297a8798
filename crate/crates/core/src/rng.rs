//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is a ChaCha8 generator seeded from a
//! master seed mixed with integer tags, so record `i` of a dataset or
//! iteration `k` of a run can be regenerated without replaying earlier draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(master), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stream tags, so that unrelated consumers of one master seed never share
/// a derived stream.
pub mod tag {
    pub const CLEAN_TRAIN: u64 = 1;
    pub const CLEAN_EVAL: u64 = 2;
    pub const CLEAN_PRETRAIN: u64 = 3;
    pub const DEGRADE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const ITERATION: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const EXTRACTOR: u64 = 9;
    pub const SWEEP: u64 = 10;
}
