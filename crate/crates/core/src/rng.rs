//! Seed splitting.
//!
//! Every random draw in a run comes from one master seed. A stream is
//! addressed by a `(tag, index)` pair: the tag selects a ChaCha key derived
//! from the master seed, the index selects the ChaCha stream under that key.
//! Streams are independent of evaluation order, so parallel loops that pull
//! one stream per sample stay reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags used across the crate.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const PROMPTS: u64 = 3;
    pub const ROLLOUT: u64 = 4;
    pub const NOISE_TIME: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const ORACLE: u64 = 7;
    pub const GRAD_CHECK: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, tag: u64, index: u64) -> Rng {
        let key = splitmix64(self.seed ^ splitmix64(tag));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        rng
    }

    /// A child seed stream, for handing a sub-task its own namespace.
    pub fn child(&self, tag: u64, index: u64) -> SeedStream {
        SeedStream::new(splitmix64(splitmix64(self.seed ^ tag).wrapping_add(index)))
    }
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
