//! Seed derivation.
//!
//! Every random draw in the pipeline comes from a generator seeded by mixing a
//! base seed with the coordinates of the draw (stage, epoch, cube index, task).
//! Results therefore do not depend on iteration or worker order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags for the independent random streams of a run.
pub mod stream {
    pub const INIT_ENCODER: u64 = 0x01;
    pub const INIT_SPATIAL: u64 = 0x02;
    pub const INIT_SPECTRAL: u64 = 0x03;
    pub const INIT_MIM: u64 = 0x04;
    pub const INIT_SEGMENTATION: u64 = 0x05;
    pub const SHUFFLE: u64 = 0x10;
    pub const SPATIAL_JIGSAW: u64 = 0x11;
    pub const SPECTRAL_JIGSAW: u64 = 0x12;
    pub const MASKING: u64 = 0x13;
    pub const FINETUNE_SHUFFLE: u64 = 0x20;
    pub const SYNTHETIC: u64 = 0x30;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with an arbitrary list of coordinates.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, parts))
}
