//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator: a 64-bit seed selects the key and a 64-bit stream id selects an
//! independent sequence. Consumers pick a fixed stream per purpose, so data
//! generation, initialization, shuffling and drop-path draws never share
//! state and each is a pure function of `(seed, stream)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA_POSITIONS: u64 = 2;
    pub const DATA_NOISE: u64 = 3;
    pub const DATA_SHUFFLE: u64 = 4;
    pub const DROP_PATH: u64 = 5;
    pub const PROBE: u64 = 6;
    /// Epoch `e` shuffles with stream `EPOCH_SHUFFLE_BASE + e`.
    pub const EPOCH_SHUFFLE_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Normal draw with standard deviation `std`, rejected outside `±2·std`.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    lo + (hi - lo) * rng.random::<f64>()
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
