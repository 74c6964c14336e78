//! Seeded random streams.
//!
//! Every stochastic choice in a simulation draws from a stream keyed by
//! `(seed, purpose, round, node)`. Streams never depend on the order in which
//! other streams were consumed, so per-node work can run in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Activity = 2,
    Topology = 3,
    Batch = 4,
    Personalize = 5,
    Synth = 6,
    Calibration = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the key components into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, purpose: Purpose, round: u64, node: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ round);
    splitmix64(h ^ node.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, purpose: Purpose, round: u64, node: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, round, node))
}
