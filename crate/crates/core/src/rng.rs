//! Reproducible seeding: every consumer derives its own ChaCha stream from a
//! master seed and a `(domain, index)` pair, so results do not depend on the
//! order in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ domain.rotate_left(17)) ^ index)
}

pub fn stream(master: u64, domain: u64, index: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, domain, index))
}

pub mod domain {
    pub const PATH_NOISE: u64 = 1;
    pub const PATH_UPLINK: u64 = 5;
    pub const PATH_DOWNLINK: u64 = 6;
    pub const CHANNEL_MOMENTS: u64 = 2;
    pub const NOISE_MOMENTS: u64 = 3;
    pub const ORACLE: u64 = 4;
}
