//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the master seed, so changing how much one consumer draws never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const INIT: u64 = 1;
pub const AUGMENT: u64 = 2;
pub const SUBSET: u64 = 3;
pub const LABELS: u64 = 4;
pub const SHUFFLE: u64 = 5;
pub const DATA: u64 = 6;
pub const BRANCH_INIT: u64 = 7;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
