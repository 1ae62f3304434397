//! Seed derivation for independent, scheduling-order-free random streams.
//!
//! Every stochastic unit of work (a gene within a chain, a refinement draw,
//! a training run) gets its own generator whose seed is a hash of the master
//! seed and the unit's coordinates. Results therefore do not depend on how
//! work is distributed across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a master seed with a path of stream coordinates.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn stream(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, path))
}

/// Stable numeric tags for the stream namespaces used across the crate.
pub mod tag {
    pub const PRIOR: u64 = 1;
    pub const CHAIN: u64 = 2;
    pub const REFINE: u64 = 3;
    pub const ROUND: u64 = 4;
    pub const TRAIN: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const SIMULATE: u64 = 7;
    pub const SPLIT: u64 = 8;
}
