//! Seed derivation shared by every component that needs randomness.
//!
//! All generators are `ChaCha8Rng`, whose output stream is fixed across
//! platforms. Child seeds are derived with the SplitMix64 finalizer so that a
//! client's stream depends only on `(master_seed, client_id)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `seed_i = splitmix64(master ^ splitmix64(stream))`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Named sub-streams so unrelated consumers of one seed never collide.
pub mod stream {
    pub const SPLIT: u64 = 0x0053_504c_4954;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494e_4954;
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const PRIOR: u64 = 0x5052_494f;
    pub const EP_DRAW: u64 = 0x4550_4452;
    pub const CLIENT: u64 = 0x434c_4945_4e54;
    pub const ROUND: u64 = 0x0052_4f55_4e44;
}
