//! Deterministic, addressable random streams.
//!
//! Every random decision in the pipeline draws from a stream addressed by
//! `(seed, domain, a, b)`, so results never depend on the order in which
//! samples are processed or on how many workers process them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const VIEWS: u64 = 3;
    pub const CONCEPTS: u64 = 4;
    pub const ENQUEUE: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const EVAL: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the address `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix(seed);
    for (i, part) in [domain, a, b, 0x636f_6e63_6c00_0000].into_iter().enumerate() {
        h = splitmix(h ^ part);
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
