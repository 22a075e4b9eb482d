//! Model comparison on held-out trajectories.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::metrics::{mape, rmse, sample_std, Sigma, MAPE_GUARD};
use crate::data::{sample_pairs, TrajectoryRecord, OUTPUT_DIMS, OUTPUT_NAMES};
use crate::error::{PrgpError, Result};
use crate::inference::TrainedModel;
use crate::physics::{PhysicsModel, Quantity};

/// A held-out vehicle. `truth` is what predictions are scored against and
/// must be aligned with `observed` record-for-record. Without a noise-free
/// copy, pass the observations twice.
#[derive(Debug, Clone, PartialEq)]
pub struct TestTrajectory {
    pub id: u64,
    pub observed: Vec<TrajectoryRecord>,
    pub truth: Vec<TrajectoryRecord>,
    /// Indices into `observed` the GP estimators condition on. Empty means all.
    pub conditioning: Vec<usize>,
}

impl TestTrajectory {
    pub fn new(id: u64, observed: Vec<TrajectoryRecord>, truth: Vec<TrajectoryRecord>) -> Result<Self> {
        if observed.len() != truth.len() {
            return Err(PrgpError::input(format!(
                "vehicle {id}: {} observed records vs {} truth records",
                observed.len(),
                truth.len()
            )));
        }
        if observed.iter().zip(&truth).any(|(a, b)| a.time != b.time) {
            return Err(PrgpError::input(format!("vehicle {id}: observed and truth times differ")));
        }
        Ok(Self { id, observed, truth, conditioning: Vec::new() })
    }

    /// Condition on every `stride`-th observation.
    pub fn with_stride(mut self, stride: usize) -> Self {
        self.conditioning = (0..self.observed.len()).step_by(stride.max(1)).collect();
        self
    }

    fn conditioning_set(&self) -> (Vec<f64>, DMatrix<f64>) {
        let idx: Vec<usize> = if self.conditioning.is_empty() {
            (0..self.observed.len()).collect()
        } else {
            self.conditioning.clone()
        };
        let rows: Vec<([f64; OUTPUT_DIMS], f64)> = idx
            .iter()
            .filter_map(|&i| self.observed.get(i))
            .filter_map(|r| r.outputs().map(|o| (o, r.time)))
            .collect();
        let times = rows.iter().map(|(_, t)| *t).collect();
        let outputs = DMatrix::from_fn(rows.len(), OUTPUT_DIMS, |i, j| rows[i].0[j]);
        (times, outputs)
    }
}

#[derive(Debug, Clone)]
pub enum Estimator {
    /// A trained GP or PRGP, conditioned on each test vehicle's observations.
    Gp(TrainedModel),
    /// A calibrated physics model, scored on its predicted quantity only.
    Physics { name: String, model: PhysicsModel },
    /// Returns the ground truth.
    Oracle,
}

impl Estimator {
    pub fn name(&self) -> String {
        match self {
            Estimator::Gp(m) => m.name.clone(),
            Estimator::Physics { name, .. } => name.clone(),
            Estimator::Oracle => "Oracle".into(),
        }
    }
}

/// Output dimension carrying a physics model's predicted quantity.
pub fn quantity_dim(q: Quantity) -> usize {
    match q {
        Quantity::Velocity => crate::data::DIM_VELOCITY,
        Quantity::Acceleration => crate::data::DIM_ACCELERATION,
        Quantity::SpaceGap => crate::data::DIM_SPACE_HEADWAY,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dimension: String,
    pub n: usize,
    /// `None` marks an absent cell.
    pub rmse: Option<f64>,
    /// RMSE normalized by the per-dimension sample std of the targets.
    pub rmse_sigma: Option<f64>,
    pub mape: Option<f64>,
    /// Targets left out of the MAPE average, either because the estimator
    /// was undefined there or because the target is below the MAPE guard.
    pub mask_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub sigma_normalized: bool,
}

impl EvalReport {
    pub fn cell(&self, model: &str, dimension: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.dimension == dimension)
    }
}

/// Paired targets and predictions of one (model, dimension) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model: String,
    pub dimension: String,
    pub truth: Vec<f64>,
    pub predicted: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CompareOptions {
    /// Also report σ-normalized RMSE.
    pub sigma_normalized: bool,
}

struct Cell {
    truth: Vec<f64>,
    predicted: Vec<f64>,
    masked: usize,
}

fn gp_cells(model: &TrainedModel, tests: &[TestTrajectory]) -> Result<Vec<Option<Cell>>> {
    let mut cells: Vec<Cell> = (0..OUTPUT_DIMS)
        .map(|_| Cell { truth: vec![], predicted: vec![], masked: 0 })
        .collect();
    for t in tests {
        let (times, outputs) = t.conditioning_set();
        if times.is_empty() {
            return Err(PrgpError::EmptyData(format!("vehicle {} has nothing to condition on", t.id)));
        }
        let scored: Vec<(f64, [f64; OUTPUT_DIMS])> =
            t.truth.iter().filter_map(|r| r.outputs().map(|o| (r.time, o))).collect();
        if scored.is_empty() {
            continue;
        }
        let gp = model.condition(&times, &outputs)?;
        let ts: Vec<f64> = scored.iter().map(|(t, _)| *t).collect();
        let mean = gp.predict_mean(&ts)?;
        for (i, (_, y)) in scored.iter().enumerate() {
            for (d, cell) in cells.iter_mut().enumerate() {
                cell.truth.push(y[d]);
                cell.predicted.push(mean[(i, d)]);
            }
        }
    }
    Ok(cells.into_iter().map(Some).collect())
}

fn oracle_cells(tests: &[TestTrajectory]) -> Vec<Option<Cell>> {
    (0..OUTPUT_DIMS)
        .map(|d| {
            let truth: Vec<f64> = tests
                .iter()
                .flat_map(|t| t.truth.iter().filter_map(|r| r.outputs()).map(move |o| o[d]))
                .collect();
            Some(Cell { predicted: truth.clone(), truth, masked: 0 })
        })
        .collect()
}

fn physics_cells(model: &PhysicsModel, tests: &[TestTrajectory]) -> Result<Vec<Option<Cell>>> {
    let dim = quantity_dim(model.kind.predicted_quantity());
    let mut cell = Cell { truth: vec![], predicted: vec![], masked: 0 };
    for t in tests {
        let obs = sample_pairs(&t.observed);
        let truth = sample_pairs(&t.truth);
        for ((s, n), (ts, tn)) in obs.iter().zip(&truth) {
            if model.kind.needs_next() && n.is_none() {
                continue;
            }
            let target = match model.observed_quantity(ts, tn.as_ref()) {
                Ok(v) if v.is_finite() => v,
                _ => continue,
            };
            match model.predict_quantity(s, n.as_ref()) {
                Ok(p) => {
                    cell.truth.push(target);
                    cell.predicted.push(p);
                }
                Err(PrgpError::ModelDomain(_)) => cell.masked += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok((0..OUTPUT_DIMS)
        .map(|d| if d == dim { Some(std::mem::replace(&mut cell, Cell { truth: vec![], predicted: vec![], masked: 0 })) } else { None })
        .collect())
}

fn score(model: &str, dim: usize, cell: Option<Cell>, opts: CompareOptions) -> Result<(ReportRow, Option<PredictionSet>)> {
    let dimension = OUTPUT_NAMES[dim].to_string();
    let absent = |masked| ReportRow {
        model: model.to_string(),
        dimension: dimension.clone(),
        n: 0,
        rmse: None,
        rmse_sigma: None,
        mape: None,
        mask_count: masked,
    };
    let Some(cell) = cell else { return Ok((absent(0), None)) };
    if cell.truth.is_empty() {
        return Ok((absent(cell.masked), None));
    }
    let r = rmse(&cell.truth, &cell.predicted, Sigma::Unit)?;
    let rs = if opts.sigma_normalized {
        match sample_std(&cell.truth) {
            Some(s) if s > 0.0 => Some(rmse(&cell.truth, &cell.predicted, Sigma::Uniform(s))?),
            _ => None,
        }
    } else {
        None
    };
    let (m, excluded) = match mape(&cell.truth, &cell.predicted) {
        Ok(m) => (Some(m.value), m.excluded),
        Err(PrgpError::EmptyData(_)) => (None, cell.truth.iter().filter(|y| y.abs() < MAPE_GUARD).count()),
        Err(e) => return Err(e),
    };
    let row = ReportRow {
        model: model.to_string(),
        dimension: dimension.clone(),
        n: cell.truth.len(),
        rmse: Some(r),
        rmse_sigma: rs,
        mape: m,
        mask_count: cell.masked + excluded,
    };
    let set = PredictionSet { model: model.to_string(), dimension, truth: cell.truth, predicted: cell.predicted };
    Ok((row, Some(set)))
}

/// RMSE/MAPE of every estimator on every output dimension, in estimator
/// order and then dimension order.
pub fn compare_models(
    estimators: &[Estimator],
    tests: &[TestTrajectory],
    opts: CompareOptions,
) -> Result<(EvalReport, Vec<PredictionSet>)> {
    let mut report = EvalReport { rows: Vec::new(), sigma_normalized: opts.sigma_normalized };
    let mut sets = Vec::new();
    for est in estimators {
        let name = est.name();
        let cells = match est {
            Estimator::Gp(m) => gp_cells(m, tests)?,
            Estimator::Physics { model, .. } => physics_cells(model, tests)?,
            Estimator::Oracle => oracle_cells(tests),
        };
        for (d, cell) in cells.into_iter().enumerate() {
            let (row, set) = score(&name, d, cell, opts)?;
            report.rows.push(row);
            sets.extend(set);
        }
    }
    Ok((report, sets))
}
