//! Per-trial random streams.
//!
//! Every trial draws from its own ChaCha8 stream whose seed is a mix of the
//! master seed, the trial index and a tag naming what the stream is used for.
//! Streams are therefore reproducible and independent of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type TrialRng = ChaCha8Rng;

/// Tags separating the independent streams used inside one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    Source = 1,
    Dither = 2,
    Noise = 3,
    Ensemble = 4,
    Design = 5,
    Init = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed derived from `(master_seed, trial_index, tag)`.
pub fn derive_seed(master_seed: u64, trial_index: u64, tag: StreamTag) -> u64 {
    let h = splitmix64(master_seed);
    let h = splitmix64(h ^ trial_index.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(h ^ (tag as u64).wrapping_mul(0xA076_1D64_78BD_642F))
}

pub fn trial_rng(master_seed: u64, trial_index: u64, tag: StreamTag) -> TrialRng {
    TrialRng::seed_from_u64(derive_seed(master_seed, trial_index, tag))
}
