//! Pseudo-input sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PrgpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZSampling {
    Uniform,
    /// One point per equal-width cell, placed uniformly inside the cell.
    #[default]
    JitteredGrid,
}

/// `m` sorted time points in `[t_min, t_max]`.
pub fn sample_pseudo_inputs<R: Rng + ?Sized>(
    t_min: f64,
    t_max: f64,
    m: usize,
    mode: ZSampling,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(PrgpError::input("at least one pseudo-input is required"));
    }
    if !(t_min < t_max) || !t_min.is_finite() || !t_max.is_finite() {
        return Err(PrgpError::input(format!(
            "pseudo-input domain [{t_min}, {t_max}] is empty"
        )));
    }
    let width = t_max - t_min;
    let mut z: Vec<f64> = match mode {
        ZSampling::Uniform => (0..m).map(|_| t_min + width * rng.random::<f64>()).collect(),
        ZSampling::JitteredGrid => {
            let h = width / m as f64;
            (0..m)
                .map(|i| t_min + h * (i as f64 + rng.random::<f64>()))
                .collect()
        }
    };
    z.sort_by(f64::total_cmp);
    Ok(z)
}
