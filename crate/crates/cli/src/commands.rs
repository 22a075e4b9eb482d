//! The six subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DMatrix;
use prgp_core::data::{
    attach_preceding_velocity, group_by_vehicle, parse_ngsim_csv, read_canonical_csv, sample_pairs, shuffle_split,
    synth_default_model, synth_generate, write_canonical_csv, IngestOptions, RoadBounds, Scene, Split, SynthSpec,
    TrajectoryRecord, OUTPUT_DIMS,
};
use prgp_core::eval::{
    compare_models, emit_plots, emit_report, file_stem, CompareOptions, Estimator, TestTrajectory,
};
use prgp_core::inference::{
    init_shadow, train, write_trace_csv, ShadowGP, TrainOutcome, TrainedModel, VehicleData,
};
use prgp_core::physics::{calibrate, default_bounds, Calibration, CalibrationOptions, ModelKind, PhysicsModel, SamplePair};
use serde::Serialize;

use crate::artifacts::{
    model_files, read_predictions_csv, read_report_csv, read_trace_csv, write_predictions_csv, ModelFile,
    MODEL_SUFFIX,
};
use crate::config::{parse_kind, DataConfig, RunConfig};
use crate::error::CliError;

pub const CANONICAL_FILE: &str = "canonical.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const INGEST_SUMMARY_FILE: &str = "ingest_summary.json";
pub const CALIBRATION_PARAMS_FILE: &str = "calibration_params.csv";
pub const CALIBRATION_PERFORMANCE_FILE: &str = "calibration_performance.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TRACE_SUFFIX: &str = "_trace.csv";
pub const PLOTS_DIR: &str = "plots";

#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestSummary {
    pub source: String,
    pub records: usize,
    pub vehicles: usize,
    pub skipped: BTreeMap<String, usize>,
    pub records_with_leader: usize,
    pub leader_velocity_filled: usize,
    pub fill_rate: f64,
    pub has_truth: bool,
}

pub struct Dataset {
    pub scene: Scene,
    pub summary: IngestSummary,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

fn summarize(source: &str, scene: &Scene, skipped: BTreeMap<String, usize>) -> IngestSummary {
    let records = scene.records();
    let with_leader = records.iter().filter(|r| r.preceding_id.is_some()).count();
    let filled = records.iter().filter(|r| r.preceding_velocity.is_some()).count();
    IngestSummary {
        source: source.into(),
        records: records.len(),
        vehicles: scene.vehicle_ids().len(),
        skipped,
        records_with_leader: with_leader,
        leader_velocity_filled: filled,
        fill_rate: if with_leader == 0 { 0.0 } else { filled as f64 / with_leader as f64 },
        has_truth: scene.truth().is_some(),
    }
}

pub fn synth_model(model: &str, beta: Option<&[f64]>) -> Result<PhysicsModel, CliError> {
    let kind = parse_kind(model)?;
    let default = synth_default_model(kind)?;
    Ok(match beta {
        Some(b) => PhysicsModel { beta: PhysicsModel::new(kind, b.to_vec())?.beta, ..default },
        None => default,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let (xi, delta) = (cfg.split.xi, cfg.split.delta);
    match &cfg.data {
        DataConfig::Ngsim { path, columns, road_min, road_max } => {
            let opts = IngestOptions {
                columns: columns.clone(),
                road: RoadBounds {
                    min: road_min.unwrap_or(f64::NEG_INFINITY),
                    max: road_max.unwrap_or(f64::INFINITY),
                },
            };
            let parsed = parse_ngsim_csv(path, &opts)?;
            let (records, _) = attach_preceding_velocity(parsed.records);
            let scene = Scene::new(records, xi, delta)?;
            let summary = summarize("ngsim", &scene, parsed.skipped);
            Ok(Dataset { scene, summary })
        }
        DataConfig::Canonical { path, truth_path } => {
            let records = read_canonical_csv(File::open(path)?)?;
            let scene = match truth_path {
                Some(t) => Scene::with_truth(records, read_canonical_csv(File::open(t)?)?, xi, delta)?,
                None => Scene::new(records, xi, delta)?,
            };
            let summary = summarize("canonical", &scene, BTreeMap::new());
            Ok(Dataset { scene, summary })
        }
        DataConfig::Synth(s) => {
            let model = synth_model(&s.model, s.beta.as_deref())?;
            let spec = SynthSpec {
                n_vehicles: s.n_vehicles,
                horizon_s: s.horizon_s,
                dt: s.dt,
                noise: s.noise,
                seed: cfg.seed,
                leader: s.leader,
            };
            let scene = synth_generate(&model, &spec)?;
            let summary = summarize("synth", &scene, BTreeMap::new());
            Ok(Dataset { scene, summary })
        }
    }
}

/// Vehicles with at least two usable observations, split into train and test.
pub fn split_scene(cfg: &RunConfig, scene: &Scene) -> Result<Split, CliError> {
    let usable: Vec<u64> = scene
        .vehicle_ids()
        .into_iter()
        .filter(|id| scene.vehicle(*id).iter().filter(|r| r.outputs().is_some()).count() >= 2)
        .collect();
    Ok(shuffle_split(&usable, cfg.split.test_fraction, cfg.seed)?)
}

pub fn vehicle_data(scene: &Scene, ids: &BTreeSet<u64>, stride: usize) -> Vec<VehicleData> {
    ids.iter()
        .filter_map(|id| {
            let rows: Vec<(f64, [f64; OUTPUT_DIMS])> = scene
                .vehicle(*id)
                .iter()
                .filter_map(|r| r.outputs().map(|o| (r.time, o)))
                .step_by(stride.max(1))
                .collect();
            (!rows.is_empty()).then(|| VehicleData {
                id: *id,
                times: rows.iter().map(|(t, _)| *t).collect(),
                outputs: DMatrix::from_fn(rows.len(), OUTPUT_DIMS, |i, j| rows[i].1[j]),
            })
        })
        .collect()
}

fn pairs_of(scene: &Scene, ids: Option<&BTreeSet<u64>>) -> Vec<SamplePair> {
    let records: Vec<TrajectoryRecord> = match ids {
        Some(ids) => scene.records().iter().filter(|r| ids.contains(&r.vehicle_id)).cloned().collect(),
        None => scene.records().to_vec(),
    };
    group_by_vehicle(&records).values().flat_map(|track| sample_pairs(track)).collect()
}

fn calibrate_kind(cfg: &RunConfig, kind: ModelKind, pairs: &[SamplePair]) -> Result<Calibration, CliError> {
    let opts = CalibrationOptions {
        seed: cfg.seed,
        starts: cfg.calibration.starts,
        holdout_fraction: cfg.calibration.holdout_fraction,
        time_shift: cfg.calibration.time_shift,
        ..Default::default()
    };
    Ok(calibrate(kind, pairs, &default_bounds(kind), &opts)?)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    let data = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    write_canonical_csv(BufWriter::new(File::create(dir.join(CANONICAL_FILE))?), data.scene.records())?;
    if let Some(truth) = data.scene.truth() {
        write_canonical_csv(BufWriter::new(File::create(dir.join(TRUTH_FILE))?), truth)?;
    }
    let text = serde_json::to_string_pretty(&data.summary).map_err(|e| CliError::Artifact(e.to_string()))?;
    std::fs::write(dir.join(INGEST_SUMMARY_FILE), text + "\n")?;
    let s = &data.summary;
    println!("records: {}", s.records);
    println!("vehicles: {}", s.vehicles);
    for (reason, n) in &s.skipped {
        println!("skipped {reason}: {n}");
    }
    println!("leader velocity filled: {}/{} ({:.1}%)", s.leader_velocity_filled, s.records_with_leader, 100.0 * s.fill_rate);
    Ok(data.summary)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<IngestSummary, CliError> {
    if !matches!(cfg.data, DataConfig::Synth(_)) {
        return Err(CliError::Config("`synth` needs a data section with \"source\": \"synth\"".into()));
    }
    cmd_ingest(cfg)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Vec<Calibration>, CliError> {
    let data = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let pairs = pairs_of(&data.scene, None);
    let mut fits = Vec::new();
    for name in &cfg.calibration.models {
        let kind = parse_kind(name)?;
        info!("calibrating {}", kind.label());
        fits.push(calibrate_kind(cfg, kind, &pairs)?);
    }

    let mut w = csv::Writer::from_path(dir.join(CALIBRATION_PARAMS_FILE))?;
    w.write_record(["model", "n_params", "beta_0", "beta_1", "beta_2", "beta_3", "notes"])?;
    for c in &fits {
        let mut rec = vec![c.model.kind.label().to_string(), c.model.beta.len().to_string()];
        rec.extend((0..4).map(|i| c.model.beta.get(i).map(|b| b.to_string()).unwrap_or_default()));
        rec.push(c.report.notes.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(CALIBRATION_PERFORMANCE_FILE))?;
    w.write_record([
        "model", "quantity", "n_train", "n_test", "train_rmse", "rmse", "mape", "mape_excluded", "masked", "skipped",
    ])?;
    for c in &fits {
        let r = &c.report;
        w.write_record([
            r.model.label().to_string(),
            r.quantity.name().to_string(),
            r.n_train.to_string(),
            r.n_test.to_string(),
            r.train_rmse.to_string(),
            r.rmse.to_string(),
            r.mape.map(|m| m.to_string()).unwrap_or_default(),
            r.mape_excluded.to_string(),
            r.masked.to_string(),
            r.skipped.to_string(),
        ])?;
    }
    w.flush()?;
    for c in &fits {
        println!(
            "{}: beta={:?} rmse={} mape={}",
            c.model.kind.label(),
            c.model.beta,
            c.report.rmse,
            c.report.mape.map(|m| m.to_string()).unwrap_or_else(|| "-".into())
        );
    }
    Ok(fits)
}

/// Regularizer of the configured equations, or `None` when every weight is zero.
pub fn build_shadow(cfg: &RunConfig, scene: &Scene, split: &Split, data: &[VehicleData]) -> Result<Option<ShadowGP>, CliError> {
    let mut equations = Vec::new();
    let mut gammas = Vec::new();
    let mut train_pairs: Option<Vec<SamplePair>> = None;
    for e in &cfg.equations {
        let kind = parse_kind(&e.model)?;
        let gamma = e.gamma.unwrap_or(cfg.train.gamma_default);
        if gamma == 0.0 {
            continue;
        }
        let model = match &e.beta {
            Some(b) => PhysicsModel { time_shift: cfg.calibration.time_shift, ..PhysicsModel::new(kind, b.clone())? },
            None if kind.param_count() == 0 => PhysicsModel::reference(kind),
            None => {
                let pairs = train_pairs.get_or_insert_with(|| pairs_of(scene, Some(&split.train)));
                calibrate_kind(cfg, kind, pairs)?.model
            }
        };
        equations.push(model);
        gammas.push(gamma);
    }
    if equations.is_empty() {
        return Ok(None);
    }
    let mut shadow = init_shadow(equations, 1.0, data, cfg.train.m)?;
    shadow.gamma = gammas;
    Ok(Some(shadow))
}

fn save_outcome(dir: &Path, cfg: &RunConfig, outcome: &TrainOutcome, data: &[VehicleData]) -> Result<PathBuf, CliError> {
    let stem = file_stem(&outcome.model.name);
    let labels = outcome.model.shadow.labels();
    let trace = BufWriter::new(File::create(dir.join(format!("{stem}{TRACE_SUFFIX}")))?);
    write_trace_csv(trace, &outcome.trace, &labels)?;
    let path = dir.join(format!("{stem}{MODEL_SUFFIX}"));
    ModelFile::new(outcome.model.clone(), outcome.termination.clone(), cfg.train.core(cfg.seed), data).write(&path)?;
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<TrainOutcome>, CliError> {
    let data = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let split = split_scene(cfg, &data.scene)?;
    let train_data = vehicle_data(&data.scene, &split.train, cfg.train.stride);
    let shadow = build_shadow(cfg, &data.scene, &split, &train_data)?;
    let tc = cfg.train.core(cfg.seed);
    let mut runs = Vec::new();
    if shadow.is_none() || cfg.train.include_baseline {
        runs.push(ShadowGP::empty());
    }
    runs.extend(shadow);
    let mut out = Vec::new();
    for shadow in runs {
        info!("training {} on {} trajectories", TrainedModel::name_for(&shadow), train_data.len());
        let outcome = train(&train_data, shadow, &tc)?;
        let path = save_outcome(&dir, cfg, &outcome, &train_data)?;
        let last = outcome.trace.last().map(|r| r.negative_elbo).unwrap_or(f64::NAN);
        println!(
            "{}: {:?}, final negative ELBO {last}, saved {}",
            outcome.model.name,
            outcome.termination,
            path.display()
        );
        out.push(outcome);
    }
    Ok(out)
}

pub fn test_trajectories(cfg: &RunConfig, scene: &Scene, test: &BTreeSet<u64>) -> Result<Vec<TestTrajectory>, CliError> {
    test.iter()
        .map(|id| {
            let observed: Vec<TrajectoryRecord> = scene.vehicle(*id).into_iter().cloned().collect();
            let truth = match scene.vehicle_truth(*id) {
                Some(t) => t.into_iter().cloned().collect(),
                None => observed.clone(),
            };
            Ok(TestTrajectory::new(*id, observed, truth)?.with_stride(cfg.evaluation.stride))
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<prgp_core::eval::EvalReport, CliError> {
    let data = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let split = split_scene(cfg, &data.scene)?;
    let files = if cfg.evaluation.models.is_empty() { model_files(&dir)? } else { cfg.evaluation.models.clone() };
    let mut estimators = Vec::new();
    for f in &files {
        estimators.push(Estimator::Gp(ModelFile::read(f)?.model));
    }
    if !cfg.evaluation.physics.is_empty() {
        let pairs = pairs_of(&data.scene, Some(&split.train));
        for name in &cfg.evaluation.physics {
            let kind = parse_kind(name)?;
            let fit = calibrate_kind(cfg, kind, &pairs)?;
            estimators.push(Estimator::Physics { name: kind.label().to_string(), model: fit.model });
        }
    }
    if cfg.evaluation.oracle {
        estimators.push(Estimator::Oracle);
    }
    if estimators.is_empty() {
        return Err(CliError::Config(format!(
            "nothing to evaluate: no model files in {} and no physics baselines",
            dir.display()
        )));
    }
    let tests = test_trajectories(cfg, &data.scene, &split.test)?;
    let opts = CompareOptions { sigma_normalized: cfg.evaluation.sigma_normalized };
    let (report, sets) = compare_models(&estimators, &tests, opts)?;
    emit_report(&report, &dir.join(REPORT_FILE))?;
    write_predictions_csv(&dir.join(PREDICTIONS_FILE), &sets)?;
    for r in report.rows.iter().filter(|r| r.rmse.is_some()) {
        println!(
            "{} {}: rmse={} mape={} n={}",
            r.model,
            r.dimension,
            r.rmse.unwrap_or(f64::NAN),
            r.mape.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
            r.n
        );
    }
    if cfg.evaluation.plots {
        cmd_report(cfg)?;
    }
    Ok(report)
}

/// Re-renders plots from the artifacts already in the output directory.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dir = cfg.out_dir.clone();
    let report_path = dir.join(REPORT_FILE);
    if !report_path.is_file() {
        return Err(CliError::Config(format!("{} not found; run `evaluate` first", report_path.display())));
    }
    let report = read_report_csv(&report_path)?;
    let pred_path = dir.join(PREDICTIONS_FILE);
    let sets = if pred_path.is_file() { read_predictions_csv(&pred_path)? } else { Vec::new() };
    let mut trace_files: Vec<PathBuf> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(TRACE_SUFFIX)))
        .collect();
    trace_files.sort();
    let mut traces = Vec::new();
    for p in trace_files {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let model = name.trim_end_matches(TRACE_SUFFIX).to_string();
        traces.push((model, read_trace_csv(&p)?));
    }
    let files = emit_plots(&cfg.evaluation.case, &report, &traces, &sets, &dir.join(PLOTS_DIR))?;
    println!("wrote {} plots to {}", files.len(), dir.join(PLOTS_DIR).display());
    Ok(files)
}
