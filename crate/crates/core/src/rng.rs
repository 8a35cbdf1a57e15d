//! Seeded random streams.
//!
//! Every stochastic site draws from its own ChaCha stream derived from the
//! base seed, so switching one component on or off never shifts the random
//! numbers seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stream {
    LabelDrop = 1,
    Pairing = 2,
    Prototype = 3,
    Augment = 4,
    Init = 5,
    Synthetic = 6,
    Embedding = 7,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Seed for an auxiliary derived run (e.g. one proportion of a sweep).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(0x100 + salt);
    rng.gen()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
