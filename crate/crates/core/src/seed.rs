//! Seed derivation.
//!
//! Every random stream in a run is keyed by a `(parent, stream, index)` triple
//! so that results do not depend on which worker evaluates which unit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used when deriving child seeds.
pub mod stream {
    pub const REPLICATE: u64 = 0x5245_504C;
    pub const TRUNCATION: u64 = 0x5452_554E;
    pub const PERMUTATION: u64 = 0x5045_524D;
    pub const LEVEL: u64 = 0x4C45_5645;
    pub const BASELINE: u64 = 0x4241_5345;
    pub const PILOT: u64 = 0x5049_4C54;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from a parent seed, a stream tag and an index.
pub fn derive(parent: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(parent) ^ stream) ^ index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
