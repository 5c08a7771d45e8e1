//! Seeded random streams.
//!
//! Each experiment replicate owns one seed. Truth, observation noise,
//! contamination branches and filter randomness draw from separate ChaCha
//! streams of that seed, so changing one filter never perturbs the truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent stream of a replicate seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Truth = 0,
    Observation = 1,
    Contamination = 2,
    Filter = 3,
    BurnIn = 4,
    Ensemble = 5,
}

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of replicate `replicate` in sweep cell `cell`. Depends only on its
/// arguments, so parallel sweeps are reproducible regardless of scheduling.
pub fn derive_seed(master: u64, cell: u64, replicate: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ cell) ^ replicate.rotate_left(32))
}
