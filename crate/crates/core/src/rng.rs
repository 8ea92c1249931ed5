//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a hash of a tuple of integers, so streams never depend on call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a tuple of integers.
pub fn mix(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(parts))
}

/// Stream tags, kept distinct so unrelated consumers never share a stream.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SKETCH: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PROTOTYPES: u64 = 5;
    pub const SCENES: u64 = 6;
}
