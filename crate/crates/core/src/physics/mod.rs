//! Car-following models written as residual operators `Ψf - g`.
//!
//! Each model evaluates a residual on a [`KinematicSample`] (and, for models
//! that relate time `t` to `t + dt`, on the following sample). The residual is
//! zero on data generated by the same model with the same parameters.

mod calibrate;
mod nelder_mead;

pub use calibrate::{calibrate, default_bounds, CalibrationOptions, Calibration, FitReport, SamplePair};
pub use nelder_mead::{nelder_mead, NelderMeadOptions, NelderMeadResult};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PrgpError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    VelDef,
    AccDef,
    Pipes,
    Forbes,
    Ghr,
    NewellNonlinear,
    NewellLinear,
    Gipps,
    VanAerde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    Velocity,
    Acceleration,
    SpaceGap,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::Velocity => "velocity",
            Quantity::Acceleration => "acceleration",
            Quantity::SpaceGap => "space_gap",
        }
    }
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::VelDef,
        ModelKind::AccDef,
        ModelKind::Pipes,
        ModelKind::Forbes,
        ModelKind::Ghr,
        ModelKind::NewellNonlinear,
        ModelKind::NewellLinear,
        ModelKind::Gipps,
        ModelKind::VanAerde,
    ];

    /// The seven car-following models (everything except the definition operators).
    pub const CAR_FOLLOWING: [ModelKind; 7] = [
        ModelKind::Pipes,
        ModelKind::Forbes,
        ModelKind::Ghr,
        ModelKind::NewellNonlinear,
        ModelKind::NewellLinear,
        ModelKind::Gipps,
        ModelKind::VanAerde,
    ];

    pub fn param_count(self) -> usize {
        match self {
            ModelKind::VelDef | ModelKind::AccDef => 0,
            ModelKind::Pipes | ModelKind::Forbes | ModelKind::NewellLinear => 1,
            ModelKind::Ghr | ModelKind::NewellNonlinear | ModelKind::Gipps => 3,
            ModelKind::VanAerde => 4,
        }
    }

    pub fn predicted_quantity(self) -> Quantity {
        match self {
            ModelKind::VelDef | ModelKind::Gipps | ModelKind::NewellNonlinear | ModelKind::NewellLinear => {
                Quantity::Velocity
            }
            ModelKind::AccDef | ModelKind::Ghr => Quantity::Acceleration,
            ModelKind::Pipes | ModelKind::Forbes | ModelKind::VanAerde => Quantity::SpaceGap,
        }
    }

    /// Whether the residual couples the sample at `t` with the one at `t + dt`.
    pub fn needs_next(self) -> bool {
        !matches!(self, ModelKind::Pipes | ModelKind::Forbes | ModelKind::VanAerde)
    }

    /// Short label used in reports (`Vel-DEF`, `Pipes`, `NN`, ...).
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::VelDef => "Vel-DEF",
            ModelKind::AccDef => "Acc-DEF",
            ModelKind::Pipes => "Pipes",
            ModelKind::Forbes => "Forbes",
            ModelKind::Ghr => "GHR",
            ModelKind::NewellNonlinear => "NN",
            ModelKind::NewellLinear => "NL",
            ModelKind::Gipps => "Gipps",
            ModelKind::VanAerde => "VA",
        }
    }

    /// `+1` if `residual = observed - predicted`, `-1` if `residual = predicted - observed`.
    pub fn residual_sign(self) -> f64 {
        match self {
            ModelKind::Forbes | ModelKind::VelDef | ModelKind::AccDef => -1.0,
            _ => 1.0,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = PrgpError;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "veldef" | "velocitydef" => ModelKind::VelDef,
            "accdef" | "accelerationdef" => ModelKind::AccDef,
            "pipes" => ModelKind::Pipes,
            "forbes" => ModelKind::Forbes,
            "ghr" => ModelKind::Ghr,
            "nn" | "newellnonlinear" => ModelKind::NewellNonlinear,
            "nl" | "newelllinear" => ModelKind::NewellLinear,
            "gipps" => ModelKind::Gipps,
            "va" | "vanaerde" => ModelKind::VanAerde,
            _ => return Err(PrgpError::input(format!("unknown physics model `{s}`"))),
        })
    }
}

/// Kinematic state of one vehicle at one time step (feet, seconds).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KinematicSample {
    pub velocity: f64,
    pub acceleration: f64,
    pub leader_velocity: f64,
    pub space_headway: f64,
    pub time_headway: f64,
    pub position_y: f64,
    /// Time step to the following sample.
    pub dt: f64,
}

/// Sample fields a residual can depend on, in output-dimension order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    PositionY = 0,
    Velocity = 1,
    Acceleration = 2,
    LeaderVelocity = 3,
    SpaceHeadway = 4,
    TimeHeadway = 5,
}

pub const FIELD_COUNT: usize = 6;

impl KinematicSample {
    pub fn get(&self, field: Field) -> f64 {
        match field {
            Field::PositionY => self.position_y,
            Field::Velocity => self.velocity,
            Field::Acceleration => self.acceleration,
            Field::LeaderVelocity => self.leader_velocity,
            Field::SpaceHeadway => self.space_headway,
            Field::TimeHeadway => self.time_headway,
        }
    }

    pub fn set(&mut self, field: Field, value: f64) {
        match field {
            Field::PositionY => self.position_y = value,
            Field::Velocity => self.velocity = value,
            Field::Acceleration => self.acceleration = value,
            Field::LeaderVelocity => self.leader_velocity = value,
            Field::SpaceHeadway => self.space_headway = value,
            Field::TimeHeadway => self.time_headway = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsModel {
    pub kind: ModelKind,
    pub beta: Vec<f64>,
    /// Time translation of the Newell linear model; `None` uses the sample step.
    #[serde(default)]
    pub time_shift: Option<f64>,
}

/// Residual value with partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualGrad {
    pub value: f64,
    pub d_current: [f64; FIELD_COUNT],
    pub d_next: [f64; FIELD_COUNT],
    pub d_beta: Vec<f64>,
}

const VA_POLE_GUARD: f64 = 1e-6;

/// `(v_f / (k_j v_m²))·(2v_m - v_f, (v_f - v_m)², ...)`: the Van Aerde coefficients
/// `(c₁, c₂, c₃)` from macroscopic free speed, jam density, speed at capacity
/// and capacity.
pub fn va_coefficients(v_f: f64, k_j: f64, v_m: f64, q_m: f64) -> Result<(f64, f64, f64)> {
    let finite = [v_f, k_j, v_m, q_m].iter().all(|v| v.is_finite());
    if !finite || k_j <= 0.0 || v_m <= 0.0 || q_m <= 0.0 || v_f <= v_m {
        return Err(PrgpError::input(
            "Van Aerde parameters need k_j > 0, v_m > 0, q_m > 0 and v_f > v_m",
        ));
    }
    let a = v_f / (k_j * v_m * v_m);
    let c1 = a * (2.0 * v_m - v_f);
    let c2 = a * (v_f - v_m).powi(2);
    let c3 = 1.0 / q_m - a;
    Ok((c1, c2, c3))
}

/// Gipps residual parameters `(β₀, β₁, β₂)` from the behavioural parameters:
/// `β₀ = b·τ`, `β₁ = b²·dt + 2l`, `β₂ = -1/B`. The `-b·ẋ·dt` term under the
/// square root is not representable and is dropped.
pub fn gipps_beta(b: f64, tau: f64, big_b: f64, l: f64, dt: f64) -> [f64; 3] {
    [b * tau, b * b * dt + 2.0 * l, -1.0 / big_b]
}

impl PhysicsModel {
    pub fn new(kind: ModelKind, beta: Vec<f64>) -> Result<Self> {
        if beta.len() != kind.param_count() {
            return Err(PrgpError::input(format!(
                "{kind} takes {} parameters, got {}",
                kind.param_count(),
                beta.len()
            )));
        }
        Ok(Self {
            kind,
            beta,
            time_shift: None,
        })
    }

    pub fn with_time_shift(mut self, shift: f64) -> Self {
        self.time_shift = Some(shift);
        self
    }

    /// Van Aerde model from macroscopic parameters.
    pub fn van_aerde(v_f: f64, k_j: f64, v_m: f64, q_m: f64) -> Result<Self> {
        let (c1, c2, c3) = va_coefficients(v_f, k_j, v_m, q_m)?;
        Self::new(ModelKind::VanAerde, vec![c1, c3, c2, v_f])
    }

    /// Parameters reported for the NGSIM case-I calibration (US-101), used as
    /// starting points for training.
    pub fn reference(kind: ModelKind) -> Self {
        let beta = match kind {
            ModelKind::VelDef | ModelKind::AccDef => vec![],
            ModelKind::Pipes => vec![3.6],
            ModelKind::Forbes => vec![0.81],
            ModelKind::Ghr => vec![0.8, 2.0, 1.5],
            ModelKind::NewellNonlinear => vec![40.0, 2.49, 33.16],
            ModelKind::NewellLinear => vec![33.16],
            ModelKind::Gipps => gipps_beta(1.0, 0.1, 1.0, 6.0, 0.1).to_vec(),
            ModelKind::VanAerde => {
                return Self::van_aerde(11.11, 0.25, 8.33, 0.708).expect("reference VA parameters are valid")
            }
        };
        Self {
            kind,
            beta,
            time_shift: None,
        }
    }

    fn check(&self, s: &KinematicSample, next: Option<&KinematicSample>) -> Result<()> {
        if self.beta.len() != self.kind.param_count() {
            return Err(PrgpError::input(format!(
                "{} takes {} parameters, got {}",
                self.kind,
                self.kind.param_count(),
                self.beta.len()
            )));
        }
        if self.kind.needs_next() {
            let n = next.ok_or_else(|| PrgpError::input(format!("{} needs the following sample", self.kind)))?;
            if !(s.dt > 0.0) || !s.dt.is_finite() {
                return Err(PrgpError::input("dt must be positive"));
            }
            if !n.velocity.is_finite() || !n.acceleration.is_finite() || !n.position_y.is_finite() {
                return Err(PrgpError::input("following sample must be finite"));
            }
        }
        let fields = [
            s.velocity,
            s.acceleration,
            s.leader_velocity,
            s.space_headway,
            s.time_headway,
            s.position_y,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(PrgpError::input("sample fields must be finite"));
        }
        Ok(())
    }

    /// Residual `Ψf - g` on one sample.
    pub fn residual(&self, s: &KinematicSample, next: Option<&KinematicSample>) -> Result<f64> {
        Ok(self.residual_grad(s, next)?.value)
    }

    /// Residual together with its partial derivatives with respect to the
    /// sample fields and the parameters.
    pub fn residual_grad(&self, s: &KinematicSample, next: Option<&KinematicSample>) -> Result<ResidualGrad> {
        self.check(s, next)?;
        let b = &self.beta;
        let mut dc = [0.0; FIELD_COUNT];
        let mut dn = [0.0; FIELD_COUNT];
        let mut db = vec![0.0; b.len()];
        let value = match self.kind {
            ModelKind::Pipes => {
                dc[Field::SpaceHeadway as usize] = 1.0;
                dc[Field::Velocity as usize] = -b[0];
                db[0] = -s.velocity;
                s.space_headway - s.velocity * b[0]
            }
            ModelKind::Forbes => {
                dc[Field::TimeHeadway as usize] = 1.0;
                dc[Field::SpaceHeadway as usize] = -1.0;
                dc[Field::Velocity as usize] = b[0];
                db[0] = s.velocity;
                s.time_headway - s.space_headway + s.velocity * b[0]
            }
            ModelKind::Ghr => {
                let n = next.expect("checked");
                let v1 = n.velocity;
                let gap = s.space_headway;
                if v1 <= 0.0 || gap <= 0.0 {
                    return Err(PrgpError::domain("GHR needs positive velocity and space headway"));
                }
                let dv = s.leader_velocity - s.velocity;
                let p = v1.powf(b[1]);
                let q = gap.powf(b[2]);
                let t = b[0] * p * dv / q;
                dn[Field::Acceleration as usize] = 1.0;
                dn[Field::Velocity as usize] = -t * b[1] / v1;
                dc[Field::LeaderVelocity as usize] = -b[0] * p / q;
                dc[Field::Velocity as usize] = b[0] * p / q;
                dc[Field::SpaceHeadway as usize] = t * b[2] / gap;
                db[0] = -p * dv / q;
                db[1] = -t * v1.ln();
                db[2] = t * gap.ln();
                n.acceleration - t
            }
            ModelKind::NewellNonlinear => {
                let n = next.expect("checked");
                let (nu, lambda, l) = (b[0], b[1], b[2]);
                if nu.abs() < 1e-12 {
                    return Err(PrgpError::domain("Newell free-flow speed must be non-zero"));
                }
                let x = s.space_headway - l;
                let e = (-(lambda / nu) * x).exp();
                dn[Field::Velocity as usize] = 1.0;
                dc[Field::SpaceHeadway as usize] = -lambda * e;
                db[0] = -1.0 + e + e * lambda * x / nu;
                db[1] = -e * x;
                db[2] = lambda * e;
                n.velocity - nu * (1.0 - e)
            }
            ModelKind::NewellLinear => {
                let n = next.expect("checked");
                let shift = self.time_shift.unwrap_or(s.dt);
                if !(shift > 0.0) {
                    return Err(PrgpError::input("Newell time shift must be positive"));
                }
                dn[Field::Velocity as usize] = 1.0;
                dc[Field::SpaceHeadway as usize] = -1.0 / shift;
                db[0] = 1.0 / shift;
                n.velocity - (s.space_headway - b[0]) / shift
            }
            ModelKind::Gipps => {
                let n = next.expect("checked");
                let vl = s.leader_velocity;
                let radicand = b[1] + b[2] * vl * vl - 2.0 * s.space_headway;
                if radicand < 0.0 {
                    return Err(PrgpError::domain(format!("Gipps radicand is negative ({radicand})")));
                }
                let root = radicand.sqrt();
                let inv = 1.0 / root.max(f64::MIN_POSITIVE);
                dn[Field::Velocity as usize] = 1.0;
                dc[Field::LeaderVelocity as usize] = -b[2] * vl * inv;
                dc[Field::SpaceHeadway as usize] = inv;
                db[0] = 1.0;
                db[1] = -0.5 * inv;
                db[2] = -0.5 * vl * vl * inv;
                n.velocity + b[0] - root
            }
            ModelKind::VanAerde => {
                let d = b[3] - s.velocity;
                if d <= VA_POLE_GUARD {
                    return Err(PrgpError::domain(format!(
                        "Van Aerde pole: free speed {} does not exceed velocity {}",
                        b[3], s.velocity
                    )));
                }
                dc[Field::SpaceHeadway as usize] = 1.0;
                dc[Field::Velocity as usize] = -b[1] - b[2] / (d * d);
                db[0] = -1.0;
                db[1] = -s.velocity;
                db[2] = -1.0 / d;
                db[3] = b[2] / (d * d);
                s.space_headway - b[0] - b[1] * s.velocity - b[2] / d
            }
            ModelKind::VelDef => {
                let n = next.expect("checked");
                dn[Field::PositionY as usize] = 1.0 / s.dt;
                dc[Field::PositionY as usize] = -1.0 / s.dt;
                dc[Field::Velocity as usize] = -1.0;
                (n.position_y - s.position_y) / s.dt - s.velocity
            }
            ModelKind::AccDef => {
                let n = next.expect("checked");
                dn[Field::Velocity as usize] = 1.0 / s.dt;
                dc[Field::Velocity as usize] = -1.0 / s.dt;
                dc[Field::Acceleration as usize] = -1.0;
                (n.velocity - s.velocity) / s.dt - s.acceleration
            }
        };
        if !value.is_finite() {
            return Err(PrgpError::domain(format!("{} residual is not finite", self.kind)));
        }
        Ok(ResidualGrad {
            value,
            d_current: dc,
            d_next: dn,
            d_beta: db,
        })
    }

    /// The quantity this model predicts, solved from its equation.
    pub fn predict_quantity(&self, s: &KinematicSample, next: Option<&KinematicSample>) -> Result<f64> {
        self.check(s, next)?;
        let b = &self.beta;
        let v = match self.kind {
            ModelKind::Pipes => s.velocity * b[0],
            ModelKind::Forbes => s.time_headway + s.velocity * b[0],
            ModelKind::VanAerde => {
                let d = b[3] - s.velocity;
                if d <= VA_POLE_GUARD {
                    return Err(PrgpError::domain("Van Aerde pole"));
                }
                b[0] + b[1] * s.velocity + b[2] / d
            }
            ModelKind::Ghr => {
                let n = next.expect("checked");
                if n.velocity <= 0.0 || s.space_headway <= 0.0 {
                    return Err(PrgpError::domain("GHR needs positive velocity and space headway"));
                }
                b[0] * n.velocity.powf(b[1]) * (s.leader_velocity - s.velocity) / s.space_headway.powf(b[2])
            }
            ModelKind::NewellNonlinear => {
                if b[0].abs() < 1e-12 {
                    return Err(PrgpError::domain("Newell free-flow speed must be non-zero"));
                }
                b[0] * (1.0 - (-(b[1] / b[0]) * (s.space_headway - b[2])).exp())
            }
            ModelKind::NewellLinear => {
                let shift = self.time_shift.unwrap_or(s.dt);
                if !(shift > 0.0) {
                    return Err(PrgpError::input("Newell time shift must be positive"));
                }
                (s.space_headway - b[0]) / shift
            }
            ModelKind::Gipps => {
                let r = b[1] + b[2] * s.leader_velocity.powi(2) - 2.0 * s.space_headway;
                if r < 0.0 {
                    return Err(PrgpError::domain(format!("Gipps radicand is negative ({r})")));
                }
                r.sqrt() - b[0]
            }
            ModelKind::VelDef => (next.expect("checked").position_y - s.position_y) / s.dt,
            ModelKind::AccDef => (next.expect("checked").velocity - s.velocity) / s.dt,
        };
        if !v.is_finite() {
            return Err(PrgpError::domain(format!("{} prediction is not finite", self.kind)));
        }
        Ok(v)
    }

    /// The observed counterpart of [`Self::predict_quantity`].
    pub fn observed_quantity(&self, s: &KinematicSample, next: Option<&KinematicSample>) -> Result<f64> {
        self.check(s, next)?;
        Ok(match self.kind {
            ModelKind::Pipes | ModelKind::Forbes | ModelKind::VanAerde => s.space_headway,
            ModelKind::Ghr => next.expect("checked").acceleration,
            ModelKind::NewellNonlinear | ModelKind::NewellLinear | ModelKind::Gipps => {
                next.expect("checked").velocity
            }
            ModelKind::VelDef => s.velocity,
            ModelKind::AccDef => s.acceleration,
        })
    }
}
