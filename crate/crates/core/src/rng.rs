//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by the manifest seed mixed with a stream label, so streams never depend on
//! the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for `(seed, stream)`.
pub fn derive(seed: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

/// Stream labels for the fixed components of a run.
pub mod streams {
    pub const BASE_INIT: u64 = 0x0001;
    pub const ENCODER: u64 = 0x0002;
    pub const FUSION_INIT: u64 = 0x0003;
    pub const PROJECTOR_INIT: u64 = 0x0004;
    pub const PRETRAIN_DATA: u64 = 0x0005;
    pub const SHUFFLE: u64 = 0x0006;
    pub const GRADCHECK: u64 = 0x0007;
    /// Per-sample streams are `SAMPLE_BASE + sample seed`.
    pub const SAMPLE_BASE: u64 = 1 << 40;
}
