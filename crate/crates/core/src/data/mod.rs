//! Trajectory records, scenes and the ingestion/preprocessing pipeline.

mod leader;
mod ngsim;
mod split;
mod synth;

pub use leader::{attach_preceding_velocity, identify_leader, FillStats};
pub use ngsim::{
    parse_ngsim_csv, parse_ngsim_reader, read_canonical_csv, write_canonical_csv, ColumnMap, IngestOptions,
    ParseOutcome, RoadBounds, TimeSource, CANONICAL_HEADER,
};
pub use split::{shuffle_split, Split};
pub use synth::{synth_default_model, synth_generate, LeaderProfile, NoiseSpec, SynthSpec};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{PrgpError, Result};
use crate::physics::{KinematicSample, SamplePair};

/// Number of GP output dimensions for the trajectory task.
pub const OUTPUT_DIMS: usize = 7;

/// Output dimension names, in model order.
pub const OUTPUT_NAMES: [&str; OUTPUT_DIMS] = [
    "position_x",
    "position_y",
    "velocity",
    "acceleration",
    "preceding_velocity",
    "space_headway",
    "time_headway",
];

pub const DIM_POSITION_X: usize = 0;
pub const DIM_POSITION_Y: usize = 1;
pub const DIM_VELOCITY: usize = 2;
pub const DIM_ACCELERATION: usize = 3;
pub const DIM_PRECEDING_VELOCITY: usize = 4;
pub const DIM_SPACE_HEADWAY: usize = 5;
pub const DIM_TIME_HEADWAY: usize = 6;

/// Default horizontal same-lane threshold ξ (ft).
pub const DEFAULT_XI: f64 = 6.0;
/// Default minimal space headway δ (ft).
pub const DEFAULT_DELTA: f64 = 1.0;
/// Default lane width used for lane-change labelling (ft).
pub const DEFAULT_LANE_WIDTH: f64 = 12.0;

/// One timestamped observation of one vehicle (feet, seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    /// Seconds since the start of the dataset.
    pub time: f64,
    pub vehicle_id: u64,
    pub local_x: f64,
    pub local_y: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub preceding_id: Option<u64>,
    pub space_headway: f64,
    pub time_headway: f64,
    pub preceding_velocity: Option<f64>,
}

impl TrajectoryRecord {
    /// The seven GP outputs, or `None` when the leader velocity is unknown.
    pub fn outputs(&self) -> Option<[f64; OUTPUT_DIMS]> {
        Some([
            self.local_x,
            self.local_y,
            self.velocity,
            self.acceleration,
            self.preceding_velocity?,
            self.space_headway,
            self.time_headway,
        ])
    }

    pub fn kinematics(&self, dt: f64) -> KinematicSample {
        KinematicSample {
            velocity: self.velocity,
            acceleration: self.acceleration,
            leader_velocity: self.preceding_velocity.unwrap_or(f64::NAN),
            space_headway: self.space_headway,
            time_headway: self.time_headway,
            position_y: self.local_y,
            dt,
        }
    }
}

/// Integer frame key (milliseconds) so that equal times compare exactly.
pub fn frame_key(time: f64) -> i64 {
    (time * 1000.0).round() as i64
}

/// Records of a scene grouped by vehicle and by frame.
#[derive(Debug, Clone)]
pub struct Scene {
    records: Vec<TrajectoryRecord>,
    /// Noise-free counterpart of `records` (same order), when known.
    truth: Option<Vec<TrajectoryRecord>>,
    pub xi: f64,
    pub delta: f64,
    frames: BTreeMap<i64, Vec<usize>>,
}

impl Scene {
    pub fn new(records: Vec<TrajectoryRecord>, xi: f64, delta: f64) -> Result<Self> {
        Self::build(records, None, xi, delta)
    }

    pub fn with_truth(
        records: Vec<TrajectoryRecord>,
        truth: Vec<TrajectoryRecord>,
        xi: f64,
        delta: f64,
    ) -> Result<Self> {
        if truth.len() != records.len() {
            return Err(PrgpError::input("ground truth must align with records"));
        }
        Self::build(records, Some(truth), xi, delta)
    }

    fn build(
        mut records: Vec<TrajectoryRecord>,
        truth: Option<Vec<TrajectoryRecord>>,
        xi: f64,
        delta: f64,
    ) -> Result<Self> {
        if !(xi > 0.0) || !(delta > 0.0) {
            return Err(PrgpError::input("xi and delta must be positive"));
        }
        let truth = match truth {
            Some(mut t) => {
                let mut idx: Vec<usize> = (0..records.len()).collect();
                idx.sort_by(|a, b| {
                    records[*a]
                        .vehicle_id
                        .cmp(&records[*b].vehicle_id)
                        .then(records[*a].time.total_cmp(&records[*b].time))
                });
                let r: Vec<_> = idx.iter().map(|i| records[*i].clone()).collect();
                let tr: Vec<_> = idx.iter().map(|i| t[*i].clone()).collect();
                records = r;
                t = tr;
                Some(t)
            }
            None => {
                records.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
                None
            }
        };
        let mut frames: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            frames.entry(frame_key(r.time)).or_default().push(i);
        }
        Ok(Self {
            records,
            truth,
            xi,
            delta,
            frames,
        })
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn truth(&self) -> Option<&[TrajectoryRecord]> {
        self.truth.as_deref()
    }

    pub fn into_parts(self) -> (Vec<TrajectoryRecord>, Option<Vec<TrajectoryRecord>>) {
        (self.records, self.truth)
    }

    pub fn vehicle_ids(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.records.iter().map(|r| r.vehicle_id).collect();
        set.into_iter().collect()
    }

    /// Records of one vehicle in time order.
    pub fn vehicle(&self, id: u64) -> Vec<&TrajectoryRecord> {
        self.records.iter().filter(|r| r.vehicle_id == id).collect()
    }

    /// Ground-truth records of one vehicle in time order.
    pub fn vehicle_truth(&self, id: u64) -> Option<Vec<&TrajectoryRecord>> {
        let truth = self.truth.as_ref()?;
        Some(
            self.records
                .iter()
                .zip(truth)
                .filter(|(r, _)| r.vehicle_id == id)
                .map(|(_, t)| t)
                .collect(),
        )
    }

    /// Records present at time `t`.
    pub fn frame(&self, t: f64) -> Option<Vec<&TrajectoryRecord>> {
        self.frames
            .get(&frame_key(t))
            .map(|idx| idx.iter().map(|i| &self.records[*i]).collect())
    }

    pub fn frame_times(&self) -> Vec<f64> {
        self.frames
            .values()
            .map(|idx| self.records[idx[0]].time)
            .collect()
    }

    /// Restricts the scene to the given vehicles.
    pub fn subset(&self, ids: &BTreeSet<u64>) -> Scene {
        let keep: Vec<usize> = (0..self.records.len())
            .filter(|i| ids.contains(&self.records[*i].vehicle_id))
            .collect();
        let records = keep.iter().map(|i| self.records[*i].clone()).collect();
        let truth = self
            .truth
            .as_ref()
            .map(|t| keep.iter().map(|i| t[*i].clone()).collect());
        Self::build(records, truth, self.xi, self.delta).expect("thresholds already validated")
    }
}

/// Groups records by vehicle id, each group sorted by time.
pub fn group_by_vehicle(records: &[TrajectoryRecord]) -> BTreeMap<u64, Vec<TrajectoryRecord>> {
    let mut out: BTreeMap<u64, Vec<TrajectoryRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.vehicle_id).or_default().push(r.clone());
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
    out
}

/// Consecutive-record pairs of one vehicle as calibration samples. `dt` is the
/// gap between the two records; the last record has no successor.
pub fn sample_pairs(track: &[TrajectoryRecord]) -> Vec<SamplePair> {
    let mut out = Vec::with_capacity(track.len());
    for (i, r) in track.iter().enumerate() {
        match track.get(i + 1) {
            Some(n) => {
                let dt = n.time - r.time;
                out.push((r.kinematics(dt), Some(n.kinematics(dt))));
            }
            None => out.push((r.kinematics(f64::NAN), None)),
        }
    }
    out
}

/// Lane index of a lateral position for a given lane width.
pub fn lane_index(local_x: f64, lane_width: f64) -> i64 {
    (local_x / lane_width).floor() as i64
}

/// Vehicles whose lane index changes between consecutive records.
pub fn lane_changing_vehicles(records: &[TrajectoryRecord], lane_width: f64) -> BTreeSet<u64> {
    group_by_vehicle(records)
        .into_iter()
        .filter(|(_, track)| {
            track
                .windows(2)
                .any(|w| lane_index(w[0].local_x, lane_width) != lane_index(w[1].local_x, lane_width))
        })
        .map(|(id, _)| id)
        .collect()
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::TrajectoryRecord;

    pub fn rec(id: u64, t: f64, x: f64, y: f64, v: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            time: t,
            vehicle_id: id,
            local_x: x,
            local_y: y,
            velocity: v,
            acceleration: 0.0,
            preceding_id: None,
            space_headway: 0.0,
            time_headway: 0.0,
            preceding_velocity: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::rec;
    use super::*;

    #[test]
    fn frames_and_vehicles() {
        let recs = vec![rec(2, 0.1, 6.0, 10.0, 5.0), rec(1, 0.0, 6.0, 0.0, 5.0), rec(1, 0.1, 6.0, 0.5, 5.0)];
        let scene = Scene::new(recs, DEFAULT_XI, DEFAULT_DELTA).unwrap();
        assert_eq!(scene.vehicle_ids(), vec![1, 2]);
        assert_eq!(scene.frame(0.1).unwrap().len(), 2);
        assert!(scene.frame(0.2).is_none());
        assert_eq!(scene.frame_times(), vec![0.0, 0.1]);
        assert!(Scene::new(vec![], 0.0, 1.0).is_err());
    }

    #[test]
    fn lane_changes_detected() {
        let recs = vec![
            rec(1, 0.0, 6.0, 0.0, 5.0),
            rec(1, 0.1, 13.0, 0.5, 5.0),
            rec(2, 0.0, 6.0, 10.0, 5.0),
            rec(2, 0.1, 7.0, 10.5, 5.0),
        ];
        let lc = lane_changing_vehicles(&recs, DEFAULT_LANE_WIDTH);
        assert_eq!(lc.into_iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn pairs_carry_step() {
        let track = vec![rec(1, 0.0, 6.0, 0.0, 5.0), rec(1, 0.5, 6.0, 2.5, 5.0)];
        let pairs = sample_pairs(&track);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.dt, 0.5);
        assert!(pairs[1].1.is_none());
    }
}
