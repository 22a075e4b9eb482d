//! The stochastic optimization loop.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::elbo::{Objective, ParamLayout, ShadowGP, VehicleData, SHADOW_JITTER};
use super::pseudo::{sample_pseudo_inputs, ZSampling};
use super::residuals::residuals_at_sample;
use crate::error::{PrgpError, Result};
use crate::gp::{GPModel, GpHyperparams, OutputScaling};
use crate::kernels::KernelHyperparams;
use crate::physics::PhysicsModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Pseudo-inputs per trajectory and iteration.
    pub m: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub gamma_default: f64,
    pub z_sampling: ZSampling,
    /// Train the physics parameters jointly with the GP.
    pub train_beta: bool,
    /// Window of the exponentially smoothed plateau test.
    pub plateau_window: usize,
    /// Relative change of the smoothed objective below which training stops.
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            m: 10,
            iterations: 2000,
            learning_rate: 1e-2,
            seed: 0,
            gamma_default: 1.0,
            z_sampling: ZSampling::JitteredGrid,
            train_beta: true,
            plateau_window: 200,
            plateau_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, shadow: &ShadowGP) -> Result<()> {
        if self.iterations == 0 {
            return Err(PrgpError::input("iterations must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(PrgpError::input("learning rate must be positive"));
        }
        if shadow.is_active() {
            let needs_next = shadow.equations.iter().any(|e| e.kind.needs_next());
            if self.m < 1 || (needs_next && self.m < 2) {
                return Err(PrgpError::input(
                    "m must be at least 2 when an equation looks one step ahead",
                ));
            }
        }
        if self.plateau_window == 0 {
            return Err(PrgpError::input("plateau window must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub negative_elbo: f64,
    pub data_term: f64,
    pub reg_terms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Termination {
    Budget,
    Plateau { iteration: usize },
    /// Stopped on an error; parameters are those of the last good iteration.
    Aborted { iteration: usize, reason: String },
}

/// Learned hyperparameters, output scales and regularizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    /// "GP" for the unregularized model, otherwise "PRGP-<equations>".
    pub name: String,
    pub hyperparams: Vec<GpHyperparams>,
    /// Per-dimension output scale shared by every trajectory.
    pub scales: Vec<f64>,
    pub shadow: ShadowGP,
}

impl TrainedModel {
    pub fn name_for(shadow: &ShadowGP) -> String {
        let labels: Vec<&str> = shadow
            .equations
            .iter()
            .zip(&shadow.gamma)
            .filter(|(_, g)| **g > 0.0)
            .map(|(e, _)| e.kind.label())
            .collect();
        if labels.is_empty() {
            "GP".to_string()
        } else {
            format!("PRGP-{}", labels.join("+"))
        }
    }

    pub fn scalings_for(&self, outputs: &DMatrix<f64>) -> Vec<OutputScaling> {
        let n = outputs.nrows().max(1) as f64;
        self.scales
            .iter()
            .enumerate()
            .map(|(j, s)| OutputScaling {
                offset: outputs.column(j).sum() / n,
                scale: *s,
            })
            .collect()
    }

    /// Conditions the learned hyperparameters on one trajectory's observations.
    pub fn condition(&self, times: &[f64], outputs: &DMatrix<f64>) -> Result<GPModel> {
        if outputs.ncols() != self.scales.len() {
            return Err(PrgpError::input(format!(
                "model has {} outputs, observations have {}",
                self.scales.len(),
                outputs.ncols()
            )));
        }
        GPModel::fit(
            times.to_vec(),
            outputs.clone(),
            self.hyperparams.clone(),
            self.scalings_for(outputs),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub trace: Vec<TraceRow>,
    pub termination: Termination,
}

/// Pooled within-trajectory standard deviation of each output.
fn pooled_scales(data: &[VehicleData]) -> Vec<f64> {
    let d = data[0].outputs.ncols();
    (0..d)
        .map(|j| {
            let mut ss = 0.0;
            let mut n = 0usize;
            for v in data {
                let col = v.outputs.column(j);
                let mean = col.sum() / col.len() as f64;
                ss += col.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
                n += col.len();
            }
            let s = (ss / n.saturating_sub(data.len()).max(1) as f64).sqrt();
            if s > 1e-12 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect()
}

fn check_data(data: &[VehicleData]) -> Result<()> {
    if data.is_empty() {
        return Err(PrgpError::EmptyData("no training trajectories".into()));
    }
    let d = data[0].outputs.ncols();
    for v in data {
        if v.times.len() < 3 {
            return Err(PrgpError::input(format!(
                "trajectory {} has {} records; at least 3 are needed",
                v.id,
                v.times.len()
            )));
        }
        if v.outputs.nrows() != v.times.len() || v.outputs.ncols() != d {
            return Err(PrgpError::input(format!("trajectory {} has mismatched shapes", v.id)));
        }
    }
    Ok(())
}

/// Starting hyperparameters in standardized units.
pub fn default_hyperparams(data: &[VehicleData]) -> Vec<GpHyperparams> {
    let span = data
        .iter()
        .map(|v| {
            let (lo, hi) = v.time_range();
            hi - lo
        })
        .fold(0.0, f64::max)
        .max(1e-3);
    let d = data[0].outputs.ncols();
    vec![
        GpHyperparams {
            kernel: KernelHyperparams::new(span / 10.0, 1.0, 1e-8),
            log_tau: 10f64.ln(),
        };
        d
    ]
}

/// Shadow GP whose initial signal variance matches the residuals of the
/// observations themselves.
pub fn init_shadow(equations: Vec<PhysicsModel>, gamma: f64, data: &[VehicleData], m: usize) -> Result<ShadowGP> {
    let span = data
        .iter()
        .map(|v| {
            let (lo, hi) = v.time_range();
            hi - lo
        })
        .fold(0.0, f64::max)
        .max(1e-3);
    let mut shadow = ShadowGP::new(
        equations,
        gamma,
        KernelHyperparams::new(2.0 * span / m.max(1) as f64, 1.0, SHADOW_JITTER),
    );
    for (w, eq) in shadow.equations.iter().enumerate() {
        let mut ss = 0.0;
        let mut n = 0usize;
        for v in data {
            if v.outputs.ncols() != crate::data::OUTPUT_DIMS {
                return Err(PrgpError::input("physics regularization needs the seven trajectory outputs"));
            }
            let res = residuals_at_sample(&v.outputs, &v.times, std::slice::from_ref(eq))?;
            for r in res[0].values().into_iter().flatten() {
                ss += r * r;
                n += 1;
            }
        }
        let var = if n > 0 { (ss / n as f64).max(1e-6) } else { 1.0 };
        shadow.shadow_hp[w].log_signal_variance = var.ln();
    }
    Ok(shadow)
}

struct Plateau {
    alpha: f64,
    window: usize,
    tol: f64,
    ema: VecDeque<f64>,
}

impl Plateau {
    fn new(window: usize, tol: f64) -> Self {
        Self {
            alpha: 2.0 / (window as f64 + 1.0),
            window,
            tol,
            ema: VecDeque::with_capacity(window + 1),
        }
    }

    /// Feeds one value; true once the smoothed value has stalled for a window.
    fn push(&mut self, x: f64) -> bool {
        let next = match self.ema.back() {
            Some(prev) => self.alpha * x + (1.0 - self.alpha) * prev,
            None => x,
        };
        self.ema.push_back(next);
        if self.ema.len() <= self.window {
            return false;
        }
        let old = self.ema.pop_front().expect("non-empty");
        (next - old).abs() / old.abs().max(1e-12) < self.tol
    }
}

/// Exponential moving average with span `window`, the smoothing used for
/// convergence checks.
pub fn smooth_trace(values: &[f64], window: usize) -> Vec<f64> {
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    for (i, v) in values.iter().enumerate() {
        out.push(if i == 0 { *v } else { alpha * v + (1.0 - alpha) * out[i - 1] });
    }
    out
}

fn draw(
    data: &[VehicleData],
    m: usize,
    mode: ZSampling,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, Vec<DMatrix<f64>>)> {
    let mut zs = Vec::with_capacity(data.len());
    let mut eps = Vec::with_capacity(data.len());
    for v in data {
        let (lo, hi) = v.time_range();
        zs.push(sample_pseudo_inputs(lo, hi, m, mode, rng)?);
        let d = v.outputs.ncols();
        eps.push(DMatrix::from_fn(m, d, |_, _| StandardNormal.sample(rng)));
    }
    Ok((zs, eps))
}

/// Maximizes the ELBO over trajectories that share GP hyperparameters.
pub fn train(data: &[VehicleData], shadow: ShadowGP, config: &TrainConfig) -> Result<TrainOutcome> {
    train_from(data, default_hyperparams_checked(data)?, shadow, config)
}

fn default_hyperparams_checked(data: &[VehicleData]) -> Result<Vec<GpHyperparams>> {
    check_data(data)?;
    Ok(default_hyperparams(data))
}

/// [`train`] from explicit starting hyperparameters.
pub fn train_from(
    data: &[VehicleData],
    hp_init: Vec<GpHyperparams>,
    shadow: ShadowGP,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    check_data(data)?;
    shadow.validate()?;
    config.validate(&shadow)?;
    let scales = pooled_scales(data);
    let scalings: Vec<Vec<OutputScaling>> = data
        .iter()
        .map(|v| {
            v.means()
                .into_iter()
                .zip(&scales)
                .map(|(offset, scale)| OutputScaling { offset, scale: *scale })
                .collect()
        })
        .collect();
    let layout = ParamLayout::new(data[0].outputs.ncols(), &shadow, config.train_beta);
    let obj = Objective {
        data,
        scalings,
        hp_template: hp_init.clone(),
        shadow_template: shadow.clone(),
        layout: layout.clone(),
    };
    let active = shadow.is_active();
    let mut params = layout.pack(&hp_init, &shadow);
    let mut last_good = params.clone();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_tol);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut termination = Termination::Budget;

    for it in 1..=config.iterations {
        let (zs, eps) = if active {
            draw(data, config.m, config.z_sampling, &mut rng)?
        } else {
            (vec![], vec![])
        };
        let est = match obj.evaluate(&params, &zs, &eps) {
            Ok(e) if e.total.is_finite() && e.grad.iter().all(|g| g.is_finite()) => e,
            outcome => {
                let reason = match outcome {
                    Ok(_) => PrgpError::NonFinite { iteration: it }.to_string(),
                    Err(e) => e.to_string(),
                };
                if it == 1 {
                    return Err(PrgpError::InternalState(format!(
                        "training failed at the first iteration: {reason}"
                    )));
                }
                log::warn!("training aborted at iteration {it}: {reason}");
                termination = Termination::Aborted { iteration: it, reason };
                break;
            }
        };
        trace.push(TraceRow {
            iteration: it,
            negative_elbo: -est.total,
            data_term: est.data_term,
            reg_terms: est.reg_terms.clone(),
        });
        last_good.copy_from_slice(&params);
        adam_step(&mut params, &est.grad, &mut adam, config.learning_rate);
        if plateau.push(-est.total) {
            termination = Termination::Plateau { iteration: it };
            break;
        }
    }

    let (hyperparams, shadow) = layout.unpack(&last_good, &hp_init, &shadow);
    let name = TrainedModel::name_for(&shadow);
    Ok(TrainOutcome {
        model: TrainedModel {
            name,
            hyperparams,
            scales,
            shadow,
        },
        trace,
        termination,
    })
}

/// Plain ADAM ascent on the summed log marginal likelihood.
pub fn fit_marginal_likelihood(data: &[VehicleData], config: &TrainConfig) -> Result<TrainOutcome> {
    check_data(data)?;
    if config.iterations == 0 {
        return Err(PrgpError::input("iterations must be at least 1"));
    }
    let scales = pooled_scales(data);
    let mut hp = default_hyperparams(data);
    let mut best = hp.clone();
    let d = hp.len();
    let mut adam = AdamState::new(3 * d);
    let mut plateau = Plateau::new(config.plateau_window, config.plateau_tol);
    let mut trace = Vec::new();
    let mut termination = Termination::Budget;
    for it in 1..=config.iterations {
        let mut lml = 0.0;
        let mut grad = vec![0.0; 3 * d];
        let step = (|| -> Result<()> {
            for v in data {
                let scaling = v
                    .means()
                    .into_iter()
                    .zip(&scales)
                    .map(|(offset, scale)| OutputScaling { offset, scale: *scale })
                    .collect();
                let model = GPModel::fit(v.times.clone(), v.outputs.clone(), hp.clone(), scaling)?;
                for j in 0..d {
                    lml += model.log_marginal_likelihood(j)?;
                    let g = model.lml_gradient(j)?;
                    for k in 0..3 {
                        grad[3 * j + k] += g[k];
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = step {
            if it == 1 {
                return Err(e);
            }
            termination = Termination::Aborted {
                iteration: it,
                reason: e.to_string(),
            };
            break;
        }
        trace.push(TraceRow {
            iteration: it,
            negative_elbo: -lml,
            data_term: lml,
            reg_terms: vec![],
        });
        best.clone_from(&hp);
        let mut flat: Vec<f64> = hp
            .iter()
            .flat_map(|h| [h.kernel.log_lengthscale, h.kernel.log_signal_variance, h.log_tau])
            .collect();
        adam_step(&mut flat, &grad, &mut adam, config.learning_rate);
        for (j, h) in hp.iter_mut().enumerate() {
            h.kernel.log_lengthscale = flat[3 * j];
            h.kernel.log_signal_variance = flat[3 * j + 1];
            h.log_tau = flat[3 * j + 2];
        }
        if plateau.push(-lml) {
            termination = Termination::Plateau { iteration: it };
            break;
        }
    }
    Ok(TrainOutcome {
        model: TrainedModel {
            name: "GP".into(),
            hyperparams: best,
            scales,
            shadow: ShadowGP::empty(),
        },
        trace,
        termination,
    })
}

/// Writes the convergence trace as CSV.
pub fn write_trace_csv<W: Write>(writer: W, trace: &[TraceRow], labels: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["iteration".to_string(), "negative_elbo".into(), "data_term".into()];
    header.extend(labels.iter().map(|l| format!("reg_term_{l}")));
    w.write_record(&header)?;
    for row in trace {
        let mut rec = vec![row.iteration.to_string(), row.negative_elbo.to_string(), row.data_term.to_string()];
        rec.extend(row.reg_terms.iter().map(|r| r.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
