//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream. A stream is
//! keyed by a 64-bit run seed and a 64-bit purpose tag: the seed is expanded
//! to a 256-bit ChaCha key with `SeedableRng::seed_from_u64` and the purpose
//! selects the ChaCha stream id. Distinct purposes under the same seed are
//! therefore independent, and the draws of one purpose never depend on how
//! many draws another purpose consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags for [`stream`].
pub mod purpose {
    pub const OFFLINE_LOG: u64 = 1;
    pub const PREFERENCES: u64 = 2;
    pub const ONLINE: u64 = 3;
    pub const PROBES: u64 = 4;
    pub const COST_CLASS: u64 = 5;
    pub const EPOCH: u64 = 6;
    pub const TRIALS: u64 = 7;
}

pub fn stream(seed: u64, purpose: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

/// Inverse-CDF draw from a probability vector.
///
/// Uses exactly one uniform per call. Falls back to the last index with
/// positive mass when rounding leaves the cumulative sum short of `u`.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// A draw from the flat Dirichlet(1, ..., 1) via normalized exponentials.
pub fn dirichlet_flat<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            -(1.0 - u).ln()
        })
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}
