//! Named, splittable deterministic random streams.
//!
//! Every consumer of randomness (weight init, dropout, batch shuffling, data
//! generation) forks its own stream from a root seed by name, so adding a new
//! consumer never perturbs the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

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

    /// Child stream whose seed is derived from this seed and `name`.
    pub fn split(&self, name: &str) -> SeedStream {
        SeedStream {
            seed: splitmix64(self.seed ^ fnv1a(name.as_bytes())),
        }
    }

    /// Child stream for an indexed consumer (layer `i`, epoch `i`, ...).
    pub fn split_index(&self, name: &str, index: u64) -> SeedStream {
        let base = self.split(name);
        SeedStream {
            seed: splitmix64(base.seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))),
        }
    }

    pub fn rng(&self) -> StreamRng {
        StreamRng::seed_from_u64(self.seed)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
