//! Vehicle-level train/test split.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PrgpError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

/// Shuffles vehicle ids with `seed` and assigns `round(fraction·V)` of them,
/// clamped to `[1, V-1]`, to the test set.
pub fn shuffle_split(vehicle_ids: &[u64], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(PrgpError::input(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut ids: Vec<u64> = vehicle_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(PrgpError::input("splitting needs at least two vehicles"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    Ok(Split {
        test: ids[..n_test].iter().copied().collect(),
        train: ids[n_test..].iter().copied().collect(),
    })
}
