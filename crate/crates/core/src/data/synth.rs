//! Synthetic platoon trajectories.
//!
//! A lead vehicle follows a prescribed speed profile and every follower reacts
//! to the vehicle directly ahead through the chosen car-following model.
//! Positions advance by forward Euler and accelerations are forward
//! differences of velocity, so the definitional relations hold exactly on the
//! noise-free copy.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Scene, TrajectoryRecord, DEFAULT_DELTA, DEFAULT_XI, OUTPUT_DIMS};
use crate::error::{PrgpError, Result};
use crate::physics::{KinematicSample, ModelKind, PhysicsModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaderProfile {
    /// ft/s
    pub base_speed: f64,
    /// Amplitude of the main oscillation (ft/s). Zero gives constant speed.
    pub amplitude: f64,
    /// Period of the main oscillation (s).
    pub period: f64,
}

impl Default for LeaderProfile {
    fn default() -> Self {
        Self {
            base_speed: 30.0,
            amplitude: 6.0,
            period: 20.0,
        }
    }
}

/// Observation noise on the seven outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Standard deviation per output dimension.
    Absolute([f64; OUTPUT_DIMS]),
    /// Fraction of each dimension's standard deviation over the noise-free data.
    RelativeToStd(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_vehicles: usize,
    pub horizon_s: f64,
    pub dt: f64,
    pub noise: NoiseSpec,
    pub seed: u64,
    #[serde(default)]
    pub leader: LeaderProfile,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_vehicles: 5,
            horizon_s: 30.0,
            dt: 0.1,
            noise: NoiseSpec::Absolute([0.0; OUTPUT_DIMS]),
            seed: 0,
            leader: LeaderProfile::default(),
        }
    }
}

/// Parameters that keep a 30 ft/s platoon inside every model's domain.
pub fn synth_default_model(kind: ModelKind) -> Result<PhysicsModel> {
    match kind {
        ModelKind::Pipes => PhysicsModel::new(kind, vec![1.6]),
        ModelKind::Forbes => PhysicsModel::new(kind, vec![0.9]),
        ModelKind::Ghr => PhysicsModel::new(kind, vec![0.8, 0.6, 0.9]),
        ModelKind::NewellNonlinear => PhysicsModel::new(kind, vec![60.0, 1.2, 10.0]),
        ModelKind::NewellLinear => Ok(PhysicsModel::new(kind, vec![20.0])?.with_time_shift(1.0)),
        // the behavioural mapping makes the leader-speed coefficient negative,
        // which leaves no positive equilibrium gap at highway speeds
        ModelKind::Gipps => PhysicsModel::new(kind, vec![1.0, 200.0, 1.05]),
        ModelKind::VanAerde => PhysicsModel::van_aerde(88.0, 0.05, 60.0, 0.6),
        ModelKind::VelDef | ModelKind::AccDef => Err(PrgpError::input(format!(
            "{kind} cannot drive a platoon simulation"
        ))),
    }
}

fn sample(v: f64, vl: f64, s: f64, dt: f64) -> KinematicSample {
    KinematicSample {
        velocity: v,
        acceleration: 0.0,
        leader_velocity: vl,
        space_headway: s,
        time_headway: s / v,
        position_y: 0.0,
        dt,
    }
}

/// Velocity that satisfies a gap-type model at space headway `s`.
fn solve_gap_model(model: &PhysicsModel, s: f64) -> Result<f64> {
    let b = &model.beta;
    let v = match model.kind {
        ModelKind::Pipes => s / b[0],
        ModelKind::Forbes => {
            // b·v² − s·v + s = 0, larger root
            let disc = s * s - 4.0 * b[0] * s;
            if disc < 0.0 || b[0] <= 0.0 {
                return Err(PrgpError::domain(format!("Forbes has no speed for gap {s}")));
            }
            (s + disc.sqrt()) / (2.0 * b[0])
        }
        ModelKind::VanAerde => {
            // s = c1 + c3·v + c2/(vf − v), root below the free speed
            let (c1, c3, c2, vf) = (b[0], b[1], b[2], b[3]);
            let r = s - c1;
            let qa = c3;
            let qb = -(c3 * vf + r);
            let qc = r * vf - c2;
            let v = if qa.abs() < 1e-15 {
                -qc / qb
            } else {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc < 0.0 {
                    return Err(PrgpError::domain(format!("Van Aerde has no speed for gap {s}")));
                }
                let sq = disc.sqrt();
                let (r1, r2) = ((-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa));
                r1.min(r2)
            };
            if !(v < vf) {
                return Err(PrgpError::domain("Van Aerde speed reached the free speed"));
            }
            v
        }
        _ => unreachable!("only gap models are solved for speed"),
    };
    if !(v >= 0.0) || !v.is_finite() {
        return Err(PrgpError::domain(format!("{} gives speed {v} at gap {s}", model.kind)));
    }
    Ok(v)
}

fn equilibrium_gap(model: &PhysicsModel, v: f64, dt: f64) -> f64 {
    let b = &model.beta;
    let s = match model.kind {
        // s = s/v + b·v
        ModelKind::Forbes if v > 1.0 => b[0] * v * v / (v - 1.0),
        ModelKind::Pipes | ModelKind::VanAerde => model
            .predict_quantity(&sample(v, v, 1.0, dt), None)
            .unwrap_or(f64::NAN),
        ModelKind::NewellNonlinear if v < b[0] => b[2] - (b[0] / b[1]) * (1.0 - v / b[0]).ln(),
        ModelKind::NewellLinear => b[0] + v * model.time_shift.unwrap_or(dt),
        ModelKind::Gipps => (b[1] + b[2] * v * v - (v + b[0]).powi(2)) / 2.0,
        _ => f64::NAN,
    };
    if s.is_finite() && s > DEFAULT_DELTA {
        s
    } else {
        1.5 * v + 20.0
    }
}

enum Dynamics {
    Gap,
    Velocity,
    Acceleration,
}

fn dynamics(kind: ModelKind) -> Result<Dynamics> {
    Ok(match kind {
        ModelKind::Pipes | ModelKind::Forbes | ModelKind::VanAerde => Dynamics::Gap,
        ModelKind::NewellNonlinear | ModelKind::NewellLinear | ModelKind::Gipps => Dynamics::Velocity,
        ModelKind::Ghr => Dynamics::Acceleration,
        ModelKind::VelDef | ModelKind::AccDef => {
            return Err(PrgpError::input(format!("{kind} cannot drive a platoon simulation")))
        }
    })
}

/// Simulates a platoon and returns noisy observations with their ground truth.
pub fn synth_generate(model: &PhysicsModel, spec: &SynthSpec) -> Result<Scene> {
    let dyn_kind = dynamics(model.kind)?;
    if !(spec.dt > 0.0) || !(spec.horizon_s > 0.0) {
        return Err(PrgpError::input("dt and horizon must be positive"));
    }
    if spec.n_vehicles < 1 {
        return Err(PrgpError::input("at least one vehicle is required"));
    }
    let n = spec.n_vehicles;
    let dt = spec.dt;
    let frames = (spec.horizon_s / dt + 1e-9).floor() as usize + 1;
    let steps = frames + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lp = spec.leader;
    let (phi1, phi2): (f64, f64) = (rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI);
    let lateral: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random::<f64>() * 2.0 * PI, 8.0 + 8.0 * rng.random::<f64>()))
        .collect();
    let leader_speed = |t: f64| {
        let w = 2.0 * PI / lp.period;
        lp.base_speed + lp.amplitude * (w * t + phi1).sin() + lp.amplitude / 3.0 * (2.7 * w * t + phi2).sin()
    };

    let v0 = leader_speed(0.0);
    let mut y: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); n];
    let mut v: Vec<Vec<f64>> = vec![Vec::with_capacity(steps + 1); n];
    let mut a: Vec<Vec<f64>> = vec![Vec::new(); n];
    let gap0 = equilibrium_gap(model, v0, dt);
    for i in 0..n {
        y[i].push(-(i as f64) * gap0);
        if i > 0 && !matches!(dyn_kind, Dynamics::Gap) {
            v[i].push(v0);
        }
        if i > 0 && matches!(dyn_kind, Dynamics::Acceleration) {
            a[i].push(0.0);
        }
    }
    let mut alive = vec![true; n];
    for k in 0..steps {
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            let step = (|| -> Result<()> {
                if i == 0 {
                    let vk = leader_speed(k as f64 * dt);
                    if vk < 0.0 {
                        return Err(PrgpError::domain("leader speed profile went negative"));
                    }
                    v[0].push(vk);
                } else {
                    if v[i - 1].len() <= k {
                        return Err(PrgpError::domain("preceding vehicle stopped"));
                    }
                    let s = y[i - 1][k] - y[i][k];
                    let vl = v[i - 1][k];
                    match dyn_kind {
                        Dynamics::Gap => {
                            let vk = solve_gap_model(model, s)?;
                            v[i].push(vk);
                        }
                        Dynamics::Velocity => {
                            let next = model.predict_quantity(&sample(v[i][k], vl, s, dt), Some(&sample(0.0, 0.0, 0.0, dt)))?;
                            if next < 0.0 {
                                return Err(PrgpError::domain(format!("{} gives negative speed", model.kind)));
                            }
                            v[i].push(next);
                        }
                        Dynamics::Acceleration => {
                            let v1 = v[i][k] + a[i][k] * dt;
                            if v1 < 0.0 {
                                return Err(PrgpError::domain("GHR follower reversed"));
                            }
                            let nx = sample(v1, 0.0, 0.0, dt);
                            let a1 = model.predict_quantity(&sample(v[i][k], vl, s, dt), Some(&nx))?;
                            v[i].push(v1);
                            a[i].push(a1);
                        }
                    }
                }
                let yk = y[i][k];
                y[i].push(yk + v[i][k] * dt);
                Ok(())
            })();
            if let Err(e) = step {
                log::warn!("vehicle {} truncated at frame {}: {}", i + 1, k, e);
                alive[i] = false;
            }
        }
    }

    let mut truth = Vec::new();
    for i in 0..n {
        let kept = frames.min(v[i].len().saturating_sub(1));
        let (phase, period) = lateral[i];
        for k in 0..kept {
            let t = k as f64 * dt;
            let vel = v[i][k];
            let (preceding_id, preceding_velocity, gap) = if i == 0 {
                (None, None, 0.0)
            } else {
                (Some(i as u64), Some(v[i - 1][k]), y[i - 1][k] - y[i][k])
            };
            truth.push(TrajectoryRecord {
                time: t,
                vehicle_id: i as u64 + 1,
                local_x: 6.0 + 0.5 * (2.0 * PI * t / period + phase).sin(),
                local_y: y[i][k],
                velocity: vel,
                acceleration: (v[i][k + 1] - vel) / dt,
                preceding_id,
                space_headway: gap,
                time_headway: if i == 0 { 0.0 } else { gap / vel.max(1e-9) },
                preceding_velocity,
            });
        }
    }
    if truth.is_empty() {
        return Err(PrgpError::EmptyData("simulation produced no frames".into()));
    }

    let stds = match spec.noise {
        NoiseSpec::Absolute(s) => s,
        NoiseSpec::RelativeToStd(f) => {
            let mut s = [0.0; OUTPUT_DIMS];
            for (d, sd) in s.iter_mut().enumerate() {
                let vals: Vec<f64> = truth.iter().filter_map(|r| r.outputs()).map(|o| o[d]).collect();
                *sd = f * crate::eval::metrics::sample_std(&vals).unwrap_or(0.0);
            }
            s
        }
    };
    if stds.iter().any(|s| !(*s >= 0.0)) {
        return Err(PrgpError::input("noise standard deviations must be non-negative"));
    }
    let noise = |rng: &mut ChaCha8Rng, sd: f64| -> f64 {
        if sd == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sd).expect("positive std").sample(rng)
        }
    };
    let observed: Vec<TrajectoryRecord> = truth
        .iter()
        .map(|r| {
            let mut o = r.clone();
            o.local_x += noise(&mut rng, stds[0]);
            o.local_y += noise(&mut rng, stds[1]);
            o.velocity = (o.velocity + noise(&mut rng, stds[2])).max(0.0);
            o.acceleration += noise(&mut rng, stds[3]);
            if o.preceding_id.is_some() {
                o.preceding_velocity = o.preceding_velocity.map(|p| p + noise(&mut rng, stds[4]));
                o.space_headway = (o.space_headway + noise(&mut rng, stds[5])).max(0.0);
                o.time_headway += noise(&mut rng, stds[6]);
            }
            o
        })
        .collect();
    Scene::with_truth(observed, truth, DEFAULT_XI, DEFAULT_DELTA)
}
