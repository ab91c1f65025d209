//! Splittable seed records.
//!
//! A [`Seed`] names a deterministic random stream. Substreams are derived by
//! hashing a key path into the parent value, so `(candidate, replicate)` pairs
//! own independent streams no matter which worker evaluates them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream tags used when deriving substreams.
pub mod tag {
    pub const STAGE1: u64 = 1;
    pub const STAGE2: u64 = 2;
    pub const OPTIMIZE: u64 = 3;
    pub const PROPOSED: u64 = 4;
    pub const ONE_STAGE_BH: u64 = 5;
    pub const TWO_STAGE_BH: u64 = 6;
    pub const ESTIMATE: u64 = 7;
    pub const PRELIMINARY: u64 = 8;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(u64);

impl Seed {
    pub const fn new(value: u64) -> Self {
        Seed(value)
    }

    pub const fn value(self) -> u64 {
        self.0
    }

    /// Derives the substream named by `path`.
    pub fn substream(self, path: &[u64]) -> Seed {
        let mut h = splitmix64(self.0);
        for &k in path {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632b_e59b_d9b4_e019)));
        }
        Seed(h)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

impl std::fmt::Display for Seed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
