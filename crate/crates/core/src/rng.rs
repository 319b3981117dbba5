//! Deterministic stream derivation.
//!
//! Every random quantity in a run is drawn from a ChaCha8 stream whose seed is
//! `mix(master, domain, a, b)`, where `domain` names the purpose (noise,
//! oracle, initialization, ...) and `a`, `b` are the player index and the
//! iteration. The mixer is the SplitMix64 finalizer applied to a running
//! combination, so distinct tuples give unrelated streams and the draws of one
//! player never depend on how many draws another player made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains.
pub mod domain {
    pub const PRIVACY_NOISE: u64 = 0x5052_4956;
    pub const ORACLE_NOISE: u64 = 0x4f52_434c;
    pub const INIT: u64 = 0x494e_4954;
    pub const INSTANCE: u64 = 0x494e_5354;
    pub const TOPOLOGY: u64 = 0x544f_504f;
    pub const PROBE: u64 = 0x5052_4f42;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a domain tag and two indices into one 64-bit seed.
pub fn mix(master: u64, domain: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ domain);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

pub fn stream(master: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(master, domain, a, b))
}
