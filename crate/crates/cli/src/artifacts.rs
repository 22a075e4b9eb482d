//! On-disk artifacts: model files, traces, reports and predictions.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use prgp_core::data::{OUTPUT_DIMS, OUTPUT_NAMES};
use prgp_core::eval::{EvalReport, PredictionSet, ReportRow};
use prgp_core::inference::{Termination, TraceRow, TrainConfig, TrainedModel, VehicleData};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MODEL_FORMAT: &str = "prgp-model";
pub const MODEL_VERSION: u32 = 1;
pub const MODEL_SUFFIX: &str = ".model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrajectory {
    pub vehicle_id: u64,
    pub times: Vec<f64>,
    /// One row of the seven outputs per time.
    pub outputs: Vec<[f64; OUTPUT_DIMS]>,
}

impl From<&VehicleData> for TrainingTrajectory {
    fn from(v: &VehicleData) -> Self {
        Self {
            vehicle_id: v.id,
            times: v.times.clone(),
            outputs: (0..v.outputs.nrows())
                .map(|i| std::array::from_fn(|j| v.outputs[(i, j)]))
                .collect(),
        }
    }
}

impl TrainingTrajectory {
    pub fn to_vehicle_data(&self) -> VehicleData {
        VehicleData {
            id: self.vehicle_id,
            times: self.times.clone(),
            outputs: DMatrix::from_fn(self.outputs.len(), OUTPUT_DIMS, |i, j| self.outputs[i][j]),
        }
    }
}

/// Versioned JSON container of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub output_names: Vec<String>,
    pub model: TrainedModel,
    pub termination: Termination,
    pub train_config: TrainConfig,
    pub training_data: Vec<TrainingTrajectory>,
}

impl ModelFile {
    pub fn new(model: TrainedModel, termination: Termination, train_config: TrainConfig, data: &[VehicleData]) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            output_names: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            model,
            termination,
            train_config,
            training_data: data.iter().map(TrainingTrajectory::from).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let art = |m: String| CliError::Artifact(format!("{}: {m}", path.display()));
        let r = BufReader::new(File::open(path)?);
        let value: serde_json::Value = serde_json::from_reader(r).map_err(|e| art(e.to_string()))?;
        match value.get("format").and_then(|v| v.as_str()) {
            Some(MODEL_FORMAT) => {}
            other => return Err(art(format!("not a model file (format {other:?})"))),
        }
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MODEL_VERSION as u64 => {}
            other => return Err(art(format!("unsupported model version {other:?}"))),
        }
        serde_json::from_value(value).map_err(|e| art(e.to_string()))
    }
}

/// Model files in `dir`, sorted by name.
pub fn model_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(MODEL_SUFFIX)))
        .collect();
    out.sort();
    Ok(out)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |m: &str| CliError::Artifact(format!("{}: {m}", path.display()));
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, CliError> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| bad("malformed trace row"))
        };
        let iteration = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("malformed trace row"))?;
        let reg_terms = (3..rec.len()).map(num).collect::<Result<Vec<_>, _>>()?;
        out.push(TraceRow { iteration, negative_elbo: num(1)?, data_term: num(2)?, reg_terms });
    }
    Ok(out)
}

pub fn write_predictions_csv(path: &Path, sets: &[PredictionSet]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "dimension", "truth", "predicted"])?;
    for s in sets {
        for (t, p) in s.truth.iter().zip(&s.predicted) {
            w.write_record([s.model.as_str(), s.dimension.as_str(), &t.to_string(), &p.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionSet>, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out: Vec<PredictionSet> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64, CliError> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::Artifact(format!("{}: malformed prediction row", path.display())))
        };
        let (model, dim) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        let (t, p) = (parse(2)?, parse(3)?);
        match out.last_mut() {
            Some(s) if s.model == model && s.dimension == dim => {
                s.truth.push(t);
                s.predicted.push(p);
            }
            _ => out.push(PredictionSet {
                model: model.into(),
                dimension: dim.into(),
                truth: vec![t],
                predicted: vec![p],
            }),
        }
    }
    Ok(out)
}

pub fn read_report_csv(path: &Path) -> Result<EvalReport, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let sigma_normalized = headers.iter().any(|h| h == "rmse_sigma");
    let bad = || CliError::Artifact(format!("{}: malformed report row", path.display()));
    let opt = |s: Option<&str>| -> Result<Option<f64>, CliError> {
        match s.unwrap_or("") {
            "" => Ok(None),
            v => v.parse().map(Some).map_err(|_| bad()),
        }
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(ReportRow {
            model: rec.get(0).ok_or_else(bad)?.to_string(),
            dimension: rec.get(1).ok_or_else(bad)?.to_string(),
            n: match rec.get(2).unwrap_or("") {
                "" => 0,
                v => v.parse().map_err(|_| bad())?,
            },
            rmse: opt(rec.get(3))?,
            mape: opt(rec.get(4))?,
            mask_count: rec.get(5).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            rmse_sigma: if sigma_normalized { opt(rec.get(6))? } else { None },
        });
    }
    Ok(EvalReport { rows, sigma_normalized })
}
