//! Deterministic seed hierarchy. Every consumer derives its own ChaCha stream
//! from `(seed, tag, index)`, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are part of the on-disk reproducibility contract.
pub mod tag {
    pub const SEED_DESIGN: u64 = 1;
    pub const SEED_NOISE: u64 = 2;
    pub const ORACLE_NOISE: u64 = 3;
    pub const ITERATION: u64 = 4;
    pub const GP_FIT: u64 = 5;
    pub const PATH: u64 = 6;
    pub const EA: u64 = 7;
    pub const WEIGHTS: u64 = 8;
    pub const TEST: u64 = 99;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with a tag into a child seed.
pub fn derive(seed: u64, tag: u64) -> u64 {
    splitmix(seed ^ splitmix(tag.wrapping_mul(0x2545_f491_4f6c_dd1d)))
}

/// Independent stream for `(seed, tag, index)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag));
    rng.set_stream(index);
    rng
}

/// Draws a child seed from a parent stream.
pub fn child_seed(rng: &mut Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
