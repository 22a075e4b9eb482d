//! Least-squares calibration of a single car-following model against observed
//! kinematics, using multi-start Nelder–Mead over a parameter box.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nelder_mead::{nelder_mead, NelderMeadOptions};
use super::{KinematicSample, ModelKind, PhysicsModel, Quantity};
use crate::error::{PrgpError, Result};
use crate::eval::metrics::{self, Sigma};

/// A sample at `t` and, for models that need it, the sample at `t + dt`.
pub type SamplePair = (KinematicSample, Option<KinematicSample>);

/// Squared-error charge for a sample that is infeasible under the trial parameters.
const INFEASIBLE_PENALTY: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub seed: u64,
    pub starts: usize,
    pub holdout_fraction: f64,
    pub time_shift: Option<f64>,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            starts: 8,
            holdout_fraction: 0.2,
            time_shift: None,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelKind,
    pub quantity: Quantity,
    pub beta: Vec<f64>,
    pub train_rmse: f64,
    pub rmse: f64,
    /// Percent; `None` when every held-out target is below the MAPE guard.
    pub mape: Option<f64>,
    pub mape_excluded: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Samples dropped before fitting (missing or non-finite fields).
    pub skipped: usize,
    /// Held-out samples infeasible under the fitted parameters.
    pub masked: usize,
    pub evaluations: usize,
    pub notes: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub model: PhysicsModel,
    pub report: FitReport,
}

pub fn default_bounds(kind: ModelKind) -> Vec<(f64, f64)> {
    match kind {
        ModelKind::VelDef | ModelKind::AccDef => vec![],
        ModelKind::Pipes => vec![(0.01, 20.0)],
        ModelKind::Forbes => vec![(0.0, 10.0)],
        ModelKind::Ghr => vec![(0.0, 5.0), (-1.0, 3.0), (-1.0, 3.0)],
        ModelKind::NewellNonlinear => vec![(1.0, 150.0), (0.01, 20.0), (0.0, 100.0)],
        ModelKind::NewellLinear => vec![(0.0, 150.0)],
        ModelKind::Gipps => vec![(-5.0, 5.0), (-1000.0, 5000.0), (-5.0, 5.0)],
        ModelKind::VanAerde => vec![(-50.0, 50.0), (0.0, 10.0), (0.0, 2000.0), (1.0, 200.0)],
    }
}

fn sse(model: &PhysicsModel, data: &[&SamplePair]) -> f64 {
    let mut acc = 0.0;
    for (s, n) in data {
        let obs = model.observed_quantity(s, n.as_ref());
        let pred = model.predict_quantity(s, n.as_ref());
        match (obs, pred) {
            (Ok(o), Ok(p)) => acc += (o - p) * (o - p),
            _ => acc += INFEASIBLE_PENALTY,
        }
    }
    acc / data.len() as f64
}

fn latin_hypercube(bounds: &[(f64, f64)], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let perms: Vec<Vec<usize>> = bounds
        .iter()
        .map(|_| {
            let mut p: Vec<usize> = (0..count).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    (0..count)
        .map(|k| {
            bounds
                .iter()
                .zip(&perms)
                .map(|((lo, hi), perm)| {
                    let u: f64 = rng.random();
                    lo + (hi - lo) * (perm[k] as f64 + u) / count as f64
                })
                .collect()
        })
        .collect()
}

/// Fits the parameters of `kind` by minimizing the squared error of its
/// predicted quantity. A seeded fraction of the data is held out for the
/// reported RMSE/MAPE.
pub fn calibrate(
    kind: ModelKind,
    dataset: &[SamplePair],
    bounds: &[(f64, f64)],
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if bounds.len() != kind.param_count() {
        return Err(PrgpError::input(format!(
            "{kind} takes {} parameters, got {} bounds",
            kind.param_count(),
            bounds.len()
        )));
    }
    if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(PrgpError::input("calibration bounds must be finite with lo <= hi"));
    }
    let mut probe = PhysicsModel::reference(kind);
    probe.time_shift = opts.time_shift;
    let usable: Vec<&SamplePair> = dataset
        .iter()
        .filter(|(s, n)| probe.observed_quantity(s, n.as_ref()).is_ok())
        .collect();
    let skipped = dataset.len() - usable.len();
    if usable.is_empty() {
        return Err(PrgpError::EmptyData(format!(
            "no usable samples for {kind} ({skipped} skipped)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut rng);
    let n_test = if usable.len() < 2 {
        0
    } else {
        ((usable.len() as f64 * opts.holdout_fraction).round() as usize).clamp(1, usable.len() - 1)
    };
    let (test_idx, train_idx) = order.split_at(n_test);
    let train: Vec<&SamplePair> = train_idx.iter().map(|i| usable[*i]).collect();
    // With a single usable sample the report is computed in-sample.
    let test: Vec<&SamplePair> = if n_test == 0 {
        train.clone()
    } else {
        test_idx.iter().map(|i| usable[*i]).collect()
    };

    let make = |beta: &[f64]| PhysicsModel {
        kind,
        beta: beta.to_vec(),
        time_shift: opts.time_shift,
    };

    let mut evaluations = 0;
    let mut trace = String::new();
    let beta = if kind.param_count() == 0 {
        Vec::new()
    } else {
        let starts = latin_hypercube(bounds, opts.starts.max(1), &mut rng);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (i, start) in starts.iter().enumerate() {
            let r = nelder_mead(|b| sse(&make(b), &train), start, bounds, &opts.nelder_mead);
            evaluations += r.evals;
            trace.push_str(&format!(
                "start {i}: f={:.6e} evals={} converged={} beta={:?}\n",
                r.f, r.evals, r.converged, r.x
            ));
            // strict < keeps the lowest start index on ties
            if best.as_ref().is_none_or(|(f, _)| r.f < *f) {
                best = Some((r.f, r.x));
            }
        }
        let (f, x) = best.expect("at least one start");
        if !f.is_finite() || f >= INFEASIBLE_PENALTY {
            return Err(PrgpError::Calibration {
                message: format!("{kind}: no feasible parameters found"),
                trace,
            });
        }
        x
    };
    let model = make(&beta);

    let residual_pairs = |data: &[&SamplePair]| {
        let mut obs = Vec::new();
        let mut pred = Vec::new();
        let mut masked = 0;
        for (s, n) in data {
            match (model.observed_quantity(s, n.as_ref()), model.predict_quantity(s, n.as_ref())) {
                (Ok(o), Ok(p)) => {
                    obs.push(o);
                    pred.push(p);
                }
                _ => masked += 1,
            }
        }
        (obs, pred, masked)
    };
    let (tr_obs, tr_pred, _) = residual_pairs(&train);
    if tr_obs.is_empty() {
        return Err(PrgpError::Calibration {
            message: format!("{kind}: every training sample is infeasible at the fitted parameters"),
            trace,
        });
    }
    let train_rmse = metrics::rmse(&tr_obs, &tr_pred, Sigma::Unit)?;
    let (obs, pred, masked) = residual_pairs(&test);
    if obs.is_empty() {
        return Err(PrgpError::Calibration {
            message: format!("{kind}: every held-out sample is infeasible at the fitted parameters"),
            trace,
        });
    }
    let rmse = metrics::rmse(&obs, &pred, Sigma::Unit)?;
    let (mape, mape_excluded) = match metrics::mape(&obs, &pred) {
        Ok(m) => (Some(m.value), m.excluded),
        Err(_) => (None, obs.len()),
    };
    let notes = match kind {
        ModelKind::Gipps => Some(
            "beta0 = b*tau, beta1 = b^2*dt + 2*l, beta2 = -1/B; (b=1, tau=0.1, B=1, l=6, dt=0.1) -> (0.1, 12.1, -1)"
                .to_string(),
        ),
        ModelKind::VanAerde => Some("beta = (c1, c3, c2, v_f)".to_string()),
        _ => None,
    };
    Ok(Calibration {
        report: FitReport {
            model: kind,
            quantity: kind.predicted_quantity(),
            beta: model.beta.clone(),
            train_rmse,
            rmse,
            mape,
            mape_excluded,
            n_train: train.len(),
            n_test: if n_test == 0 { train.len() } else { n_test },
            skipped,
            masked,
            evaluations,
            notes,
        },
        model,
    })
}
