//! Run configuration: JSON file, defaults and command-line overrides.

use std::path::{Path, PathBuf};

use prgp_core::data::{ColumnMap, LeaderProfile, NoiseSpec, DEFAULT_DELTA, DEFAULT_XI};
use prgp_core::inference::{TrainConfig, ZSampling};
use prgp_core::physics::ModelKind;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the synthetic generator, the split, calibration and training.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitConfig,
    /// Physics equations of the PRGP. Empty trains the pure GP only.
    pub equations: Vec<EquationConfig>,
    pub train: TrainSettings,
    pub calibration: CalibrationSettings,
    pub evaluation: EvaluationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("prgp-out"),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            equations: vec![EquationConfig { model: "Pipes".into(), gamma: None, beta: None }],
            train: TrainSettings::default(),
            calibration: CalibrationSettings::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Raw NGSIM trajectory file.
    Ngsim {
        path: PathBuf,
        #[serde(default)]
        columns: ColumnMap,
        #[serde(default)]
        road_min: Option<f64>,
        #[serde(default)]
        road_max: Option<f64>,
    },
    /// A file written by `ingest` or `synth`, optionally with its noise-free copy.
    Canonical {
        path: PathBuf,
        #[serde(default)]
        truth_path: Option<PathBuf>,
    },
    /// A simulated platoon.
    Synth(SynthSettings),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth(SynthSettings::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    /// Generating car-following model.
    pub model: String,
    /// Generating parameters; the built-in stable set when absent.
    pub beta: Option<Vec<f64>>,
    pub n_vehicles: usize,
    pub horizon_s: f64,
    pub dt: f64,
    pub noise: NoiseSpec,
    pub leader: LeaderProfile,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            model: "Pipes".into(),
            beta: None,
            n_vehicles: 21,
            horizon_s: 30.0,
            dt: 0.1,
            noise: NoiseSpec::RelativeToStd(0.1),
            leader: LeaderProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Fraction of vehicles held out for evaluation.
    pub test_fraction: f64,
    /// Same-lane threshold ξ and minimal gap δ (ft) for leader identification.
    pub xi: f64,
    pub delta: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { test_fraction: 0.5, xi: DEFAULT_XI, delta: DEFAULT_DELTA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationConfig {
    pub model: String,
    /// Regularization weight; `train.gamma_default` when absent.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Initial parameters; calibrated on the training vehicles when absent.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub m: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub gamma_default: f64,
    pub z_sampling: ZSampling,
    pub train_beta: bool,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Keep every `stride`-th record of each training trajectory.
    pub stride: usize,
    /// Also train the pure GP when equations are configured.
    pub include_baseline: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            m: t.m,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            gamma_default: t.gamma_default,
            z_sampling: t.z_sampling,
            train_beta: t.train_beta,
            plateau_window: t.plateau_window,
            plateau_tol: t.plateau_tol,
            stride: 10,
            include_baseline: true,
        }
    }
}

impl TrainSettings {
    pub fn core(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            m: self.m,
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            seed,
            gamma_default: self.gamma_default,
            z_sampling: self.z_sampling,
            train_beta: self.train_beta,
            plateau_window: self.plateau_window,
            plateau_tol: self.plateau_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub models: Vec<String>,
    pub starts: usize,
    pub holdout_fraction: f64,
    /// Fixed Newell time shift (s); the sampling interval when absent.
    pub time_shift: Option<f64>,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.iter().map(|k| k.label().to_string()).collect(),
            starts: 8,
            holdout_fraction: 0.2,
            time_shift: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    /// Prefix of plot file names.
    pub case: String,
    /// Test vehicles are conditioned on every `stride`-th observation.
    pub stride: usize,
    pub sigma_normalized: bool,
    /// Physics baselines, calibrated on the training vehicles.
    pub physics: Vec<String>,
    pub oracle: bool,
    /// Model files to compare; every `*.model.json` in the output directory when empty.
    pub models: Vec<PathBuf>,
    pub plots: bool,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            case: "run".into(),
            stride: 10,
            sigma_normalized: false,
            physics: Vec::new(),
            oracle: false,
            models: Vec::new(),
            plots: true,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub equations: Option<Vec<String>>,
    pub gamma: Option<f64>,
    pub iterations: Option<usize>,
    pub m: Option<usize>,
    pub lr: Option<f64>,
    pub test_fraction: Option<f64>,
}

pub fn parse_kind(s: &str) -> Result<ModelKind, CliError> {
    s.parse::<ModelKind>().map_err(|e| CliError::Config(e.to_string()))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // relative data paths are taken from the config file's directory
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataConfig::Ngsim { path, .. } => fix(path),
            DataConfig::Canonical { path, truth_path } => {
                fix(path);
                if let Some(t) = truth_path {
                    fix(t);
                }
            }
            DataConfig::Synth(_) => {}
        }
        for m in &mut self.evaluation.models {
            fix(m);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(eqs) = &o.equations {
            self.equations = eqs
                .iter()
                .map(|m| EquationConfig { model: m.clone(), gamma: None, beta: None })
                .collect();
        }
        if let Some(g) = o.gamma {
            for e in &mut self.equations {
                e.gamma = Some(g);
            }
            self.train.gamma_default = g;
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
        if let Some(m) = o.m {
            self.train.m = m;
        }
        if let Some(lr) = o.lr {
            self.train.learning_rate = lr;
        }
        if let Some(f) = o.test_fraction {
            self.split.test_fraction = f;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        match &self.data {
            DataConfig::Ngsim { path, .. } | DataConfig::Canonical { path, truth_path: None } => {
                if !path.is_file() {
                    return bad(format!("data file {} does not exist", path.display()));
                }
            }
            DataConfig::Canonical { path, truth_path: Some(t) } => {
                for p in [path, t] {
                    if !p.is_file() {
                        return bad(format!("data file {} does not exist", p.display()));
                    }
                }
            }
            DataConfig::Synth(s) => {
                let kind = parse_kind(&s.model)?;
                if kind.param_count() == 0 {
                    return bad(format!("{} cannot generate a platoon", kind.label()));
                }
                if s.n_vehicles < 2 || !(s.horizon_s > 0.0) || !(s.dt > 0.0) {
                    return bad("synth needs at least 2 vehicles and positive horizon and dt".into());
                }
            }
        }
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad(format!("split.test_fraction must lie in (0, 1), got {}", self.split.test_fraction));
        }
        for e in &self.equations {
            let kind = parse_kind(&e.model)?;
            if let Some(g) = e.gamma {
                if !(g >= 0.0 && g.is_finite()) {
                    return bad(format!("gamma of {} must be a non-negative number", e.model));
                }
            }
            if let Some(b) = &e.beta {
                if b.len() != kind.param_count() {
                    return bad(format!("{} takes {} parameters, got {}", kind.label(), kind.param_count(), b.len()));
                }
            }
        }
        for m in self.calibration.models.iter().chain(&self.evaluation.physics) {
            parse_kind(m)?;
        }
        if self.train.m == 0 || self.train.iterations == 0 || self.train.stride == 0 || self.evaluation.stride == 0 {
            return bad("train.m, train.iterations and the strides must be positive".into());
        }
        if !(self.train.learning_rate > 0.0) {
            return bad("train.learning_rate must be positive".into());
        }
        if !(self.train.gamma_default >= 0.0) {
            return bad("train.gamma_default must be non-negative".into());
        }
        if !(self.calibration.holdout_fraction > 0.0 && self.calibration.holdout_fraction < 1.0) {
            return bad("calibration.holdout_fraction must lie in (0, 1)".into());
        }
        if self.calibration.starts == 0 {
            return bad("calibration.starts must be positive".into());
        }
        for m in &self.evaluation.models {
            if !m.is_file() {
                return bad(format!("model file {} does not exist", m.display()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_object_is_the_default() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(7),
            equations: Some(vec!["NN".into(), "Gipps".into()]),
            gamma: Some(0.5),
            iterations: Some(10),
            m: Some(4),
            lr: Some(0.1),
            test_fraction: Some(0.3),
            out: Some("x".into()),
        });
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.equations.len(), 2);
        assert!(cfg.equations.iter().all(|e| e.gamma == Some(0.5)));
        assert_eq!((cfg.train.iterations, cfg.train.m), (10, 4));
        assert_eq!(cfg.split.test_fraction, 0.3);
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.equations[0].model = "Bogus".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.split.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data = DataConfig::Ngsim { path: "/nonexistent.csv".into(), columns: ColumnMap::default(), road_min: None, road_max: None };
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
    }
}
