//! Deterministic seed splitting.
//!
//! A master seed is split into per-city, per-density, per-run, per-driver
//! and per-purpose sub-seeds so that any single trial or any single driver's
//! blinding draw can be replayed in isolation. The scheme is
//! `child(parent, label, index)` where the label names the branch and the
//! index distinguishes siblings; each derivation is one SplitMix64 step
//! over the mixed inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub mod label {
    pub const CITY: u64 = 1;
    pub const DENSITY: u64 = 2;
    pub const RUN: u64 = 3;
    pub const WORLD: u64 = 4;
    pub const SESSION: u64 = 5;
    pub const RIDER_KEY: u64 = 6;
    pub const DRIVER_SHUFFLE: u64 = 7;
    pub const BLINDING: u64 = 8;
    pub const PREDICTION: u64 = 9;
    pub const RIDER_PLACEMENT: u64 = 10;
    pub const DRIVER_PLACEMENT: u64 = 11;
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the `index`-th child seed under `label`.
pub fn child(parent: u64, label: u64, index: u64) -> u64 {
    let mixed = parent
        .wrapping_add(label.wrapping_mul(GOLDEN_GAMMA))
        .wrapping_add(index.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    splitmix64(splitmix64(mixed).wrapping_add(GOLDEN_GAMMA))
}

/// Seeded RNG used everywhere randomness is needed.
pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}
