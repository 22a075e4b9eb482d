//! Physics residuals evaluated on a posterior sample at the pseudo-inputs.

use nalgebra::DMatrix;

use crate::data::OUTPUT_DIMS;
use crate::error::{PrgpError, Result};
use crate::physics::{Field, KinematicSample, PhysicsModel, ResidualGrad, FIELD_COUNT};

/// GP output column that feeds a residual field.
pub fn field_dim(field: usize) -> usize {
    debug_assert!(field < FIELD_COUNT);
    field + 1
}

/// Residuals of one equation. Equations that look one step ahead have one
/// entry fewer than there are pseudo-inputs.
#[derive(Debug, Clone)]
pub struct EquationResiduals {
    /// `None` where the model is undefined at that sample.
    pub entries: Vec<Option<ResidualGrad>>,
    pub masked: usize,
}

impl EquationResiduals {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.as_ref().map(|g| g.value)).collect()
    }

    pub fn total(&self) -> usize {
        self.entries.len()
    }
}

fn row_sample(f: &DMatrix<f64>, p: usize, dt: f64) -> KinematicSample {
    let mut s = KinematicSample {
        velocity: 0.0,
        acceleration: 0.0,
        leader_velocity: 0.0,
        space_headway: 0.0,
        time_headway: 0.0,
        position_y: 0.0,
        dt,
    };
    for field in [
        Field::PositionY,
        Field::Velocity,
        Field::Acceleration,
        Field::LeaderVelocity,
        Field::SpaceHeadway,
        Field::TimeHeadway,
    ] {
        s.set(field, f[(p, field_dim(field as usize))]);
    }
    s
}

/// Residuals of every equation on the sample `f_hat` (`m × 7`, data units)
/// at sorted pseudo-inputs `z`. Model-domain failures are masked.
pub fn residuals_at_sample(
    f_hat: &DMatrix<f64>,
    z: &[f64],
    equations: &[PhysicsModel],
) -> Result<Vec<EquationResiduals>> {
    let m = z.len();
    if f_hat.nrows() != m || f_hat.ncols() != OUTPUT_DIMS {
        return Err(PrgpError::input(format!(
            "sample is {}×{}, expected {}×{}",
            f_hat.nrows(),
            f_hat.ncols(),
            m,
            OUTPUT_DIMS
        )));
    }
    if z.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(PrgpError::input("pseudo-inputs must be strictly increasing"));
    }
    let samples: Vec<KinematicSample> = (0..m)
        .map(|p| {
            let dt = if p + 1 < m { z[p + 1] - z[p] } else { f64::NAN };
            row_sample(f_hat, p, dt)
        })
        .collect();
    let mut out = Vec::with_capacity(equations.len());
    for eq in equations {
        let rows = if eq.kind.needs_next() { m.saturating_sub(1) } else { m };
        let mut entries = Vec::with_capacity(rows);
        let mut masked = 0;
        for p in 0..rows {
            let next = if eq.kind.needs_next() { Some(&samples[p + 1]) } else { None };
            match eq.residual_grad(&samples[p], next) {
                Ok(g) => entries.push(Some(g)),
                Err(PrgpError::ModelDomain(_)) => {
                    masked += 1;
                    entries.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        out.push(EquationResiduals { entries, masked });
    }
    Ok(out)
}
