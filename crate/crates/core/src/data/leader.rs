//! Leader matching and identification.

use std::collections::HashMap;

use super::{frame_key, Scene, TrajectoryRecord};
use crate::error::{PrgpError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FillStats {
    /// Records that name a preceding vehicle.
    pub with_leader: usize,
    /// Of those, records whose leader was found in the same frame.
    pub filled: usize,
}

impl FillStats {
    pub fn rate(&self) -> f64 {
        if self.with_leader == 0 {
            1.0
        } else {
            self.filled as f64 / self.with_leader as f64
        }
    }
}

/// Fills `preceding_velocity` from the leader's record at the same frame.
pub fn attach_preceding_velocity(mut records: Vec<TrajectoryRecord>) -> (Vec<TrajectoryRecord>, FillStats) {
    let index: HashMap<(u64, i64), f64> = records
        .iter()
        .map(|r| ((r.vehicle_id, frame_key(r.time)), r.velocity))
        .collect();
    let mut stats = FillStats::default();
    for r in &mut records {
        r.preceding_velocity = r.preceding_id.and_then(|p| {
            stats.with_leader += 1;
            let v = index.get(&(p, frame_key(r.time))).copied();
            stats.filled += v.is_some() as usize;
            v
        });
    }
    log::info!(
        "leader velocity fill rate {:.3} ({}/{})",
        stats.rate(),
        stats.filled,
        stats.with_leader
    );
    (records, stats)
}

/// Nearest vehicle ahead within `ξ` laterally and more than `δ` ahead.
pub fn identify_leader(scene: &Scene, vehicle_id: u64, t: f64) -> Result<Option<u64>> {
    let frame = scene
        .frame(t)
        .ok_or_else(|| PrgpError::input(format!("no frame at t = {t}")))?;
    let me = frame
        .iter()
        .find(|r| r.vehicle_id == vehicle_id)
        .ok_or_else(|| PrgpError::input(format!("vehicle {vehicle_id} absent at t = {t}")))?;
    let mut best: Option<(f64, u64)> = None;
    for r in &frame {
        if r.vehicle_id == vehicle_id {
            continue;
        }
        let gap = r.local_y - me.local_y;
        if (r.local_x - me.local_x).abs() > scene.xi || gap <= scene.delta {
            continue;
        }
        let better = match best {
            None => true,
            Some((g, id)) => gap < g || (gap == g && r.vehicle_id < id),
        };
        if better {
            best = Some((gap, r.vehicle_id));
        }
    }
    Ok(best.map(|(_, id)| id))
}
