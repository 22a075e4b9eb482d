//! NGSIM-format ingestion and the canonical CSV export.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrajectoryRecord;
use crate::error::{PrgpError, Result};

/// How raw timestamps are turned into seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSource {
    /// Integer frame counter, multiplied by the frame period.
    Frame,
    /// Epoch milliseconds.
    GlobalTimeMs,
}

/// Header names of the input columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame_id: String,
    pub global_time: String,
    pub local_x: String,
    pub local_y: String,
    pub velocity: String,
    pub acceleration: String,
    pub preceding: String,
    pub space_headway: String,
    pub time_headway: String,
    /// `None` picks `global_time` when that column exists, else `frame_id`.
    pub time_source: Option<TimeSource>,
    /// Seconds per frame.
    pub frame_period: f64,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vehicle_id: "Vehicle_ID".into(),
            frame_id: "Frame_ID".into(),
            global_time: "Global_Time".into(),
            local_x: "Local_X".into(),
            local_y: "Local_Y".into(),
            velocity: "v_Vel".into(),
            acceleration: "v_Acc".into(),
            preceding: "Preceding".into(),
            space_headway: "Space_Headway".into(),
            time_headway: "Time_Headway".into(),
            time_source: None,
            frame_period: 0.1,
        }
    }
}

/// Longitudinal road extent; records outside are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadBounds {
    pub min: f64,
    pub max: f64,
}

impl Default for RoadBounds {
    fn default() -> Self {
        Self {
            min: f64::NEG_INFINITY,
            max: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestOptions {
    pub columns: ColumnMap,
    pub road: RoadBounds,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<TrajectoryRecord>,
    /// Skipped rows per reason.
    pub skipped: BTreeMap<String, usize>,
}

impl ParseOutcome {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

pub fn parse_ngsim_csv(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<ParseOutcome> {
    let file = std::fs::File::open(path)?;
    parse_ngsim_reader(file, opts)
}

struct RawRow {
    vehicle_id: u64,
    raw_time: f64,
    local_x: f64,
    local_y: f64,
    velocity: f64,
    acceleration: f64,
    preceding: Option<u64>,
    space_headway: f64,
    time_headway: f64,
}

fn parse_id(s: &str) -> Option<u64> {
    let s = s.trim();
    s.parse::<u64>()
        .ok()
        .or_else(|| s.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.fract() == 0.0).map(|v| v as u64))
}

fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_ngsim_reader<R: Read>(reader: R, opts: &IngestOptions) -> Result<ParseOutcome> {
    let cols = &opts.columns;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| PrgpError::Schema(name.to_string()));

    let source = match cols.time_source {
        Some(s) => s,
        None if find(&cols.global_time).is_some() => TimeSource::GlobalTimeMs,
        None => TimeSource::Frame,
    };
    let i_time = match source {
        TimeSource::Frame => require(&cols.frame_id)?,
        TimeSource::GlobalTimeMs => require(&cols.global_time)?,
    };
    let i_id = require(&cols.vehicle_id)?;
    let i_x = require(&cols.local_x)?;
    let i_y = require(&cols.local_y)?;
    let i_v = require(&cols.velocity)?;
    let i_a = require(&cols.acceleration)?;
    let i_p = require(&cols.preceding)?;
    let i_s = require(&cols.space_headway)?;
    let i_h = require(&cols.time_headway)?;

    let mut skipped: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |reason: &str| *skipped.entry(reason.to_string()).or_insert(0) += 1;
    let mut rows = Vec::new();
    let mut any_row = false;
    for result in rdr.records() {
        any_row = true;
        let rec = match result {
            Ok(r) => r,
            Err(_) => {
                bump("parse");
                continue;
            }
        };
        let get = |i: usize| rec.get(i).unwrap_or("");
        let parsed = (|| {
            let preceding_raw = get(i_p);
            let preceding = if preceding_raw.is_empty() {
                None
            } else {
                Some(parse_id(preceding_raw)?).filter(|p| *p != 0)
            };
            Some(RawRow {
                vehicle_id: parse_id(get(i_id))?,
                raw_time: parse_real(get(i_time))?,
                local_x: parse_real(get(i_x))?,
                local_y: parse_real(get(i_y))?,
                velocity: parse_real(get(i_v))?,
                acceleration: parse_real(get(i_a))?,
                preceding,
                space_headway: parse_real(get(i_s))?,
                time_headway: parse_real(get(i_h))?,
            })
        })();
        let Some(row) = parsed else {
            bump("parse");
            continue;
        };
        if row.local_y < opts.road.min || row.local_y > opts.road.max {
            bump("road_bounds");
            continue;
        }
        if row.velocity < 0.0 {
            bump("negative_velocity");
            continue;
        }
        if row.preceding.is_some() && row.space_headway < 0.0 {
            bump("negative_headway");
            continue;
        }
        rows.push(row);
    }
    if !any_row {
        return Err(PrgpError::EmptyData("input file has no data rows".into()));
    }

    let t0 = rows.iter().map(|r| r.raw_time).fold(f64::INFINITY, f64::min);
    let mut records: Vec<TrajectoryRecord> = rows
        .into_iter()
        .map(|r| {
            let time = match source {
                TimeSource::Frame => (r.raw_time - t0) * cols.frame_period,
                TimeSource::GlobalTimeMs => (r.raw_time - t0) / 1000.0,
            };
            TrajectoryRecord {
                time,
                vehicle_id: r.vehicle_id,
                local_x: r.local_x,
                local_y: r.local_y,
                velocity: r.velocity,
                acceleration: r.acceleration,
                preceding_id: r.preceding,
                space_headway: r.space_headway,
                time_headway: r.time_headway,
                preceding_velocity: None,
            }
        })
        .collect();
    records.sort_by(|a, b| a.vehicle_id.cmp(&b.vehicle_id).then(a.time.total_cmp(&b.time)));
    if !skipped.is_empty() {
        log::warn!("ingest skipped rows: {:?}", skipped);
    }
    Ok(ParseOutcome { records, skipped })
}

pub const CANONICAL_HEADER: [&str; 10] = [
    "vehicle_id",
    "time_s",
    "local_x_ft",
    "local_y_ft",
    "velocity_fps",
    "acceleration_fps2",
    "preceding_id",
    "preceding_velocity_fps",
    "space_headway_ft",
    "time_headway_s",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_canonical_csv<W: Write>(writer: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CANONICAL_HEADER)?;
    for r in records {
        w.write_record([
            r.vehicle_id.to_string(),
            r.time.to_string(),
            r.local_x.to_string(),
            r.local_y.to_string(),
            r.velocity.to_string(),
            r.acceleration.to_string(),
            opt(r.preceding_id),
            opt(r.preceding_velocity),
            r.space_headway.to_string(),
            r.time_headway.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_canonical_csv<R: Read>(reader: R) -> Result<Vec<TrajectoryRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 10];
    for (k, name) in CANONICAL_HEADER.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| PrgpError::Schema(name.to_string()))?;
    }
    let mut out = Vec::new();
    for (line, result) in rdr.records().enumerate() {
        let rec = result?;
        let bad = |col: &str| PrgpError::input(format!("canonical row {}: bad `{}`", line + 1, col));
        let real = |k: usize| parse_real(rec.get(idx[k]).unwrap_or("")).ok_or_else(|| bad(CANONICAL_HEADER[k]));
        let maybe = |k: usize| -> Result<Option<&str>> {
            let s = rec.get(idx[k]).unwrap_or("").trim();
            Ok(if s.is_empty() { None } else { Some(s) })
        };
        out.push(TrajectoryRecord {
            vehicle_id: parse_id(rec.get(idx[0]).unwrap_or("")).ok_or_else(|| bad("vehicle_id"))?,
            time: real(1)?,
            local_x: real(2)?,
            local_y: real(3)?,
            velocity: real(4)?,
            acceleration: real(5)?,
            preceding_id: maybe(6)?
                .map(|s| parse_id(s).ok_or_else(|| bad("preceding_id")))
                .transpose()?,
            preceding_velocity: maybe(7)?
                .map(|s| parse_real(s).ok_or_else(|| bad("preceding_velocity_fps")))
                .transpose()?,
            space_headway: real(8)?,
            time_headway: real(9)?,
        });
    }
    if out.is_empty() {
        return Err(PrgpError::EmptyData("canonical file has no rows".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Vehicle_ID,Frame_ID,Global_Time,Local_X,Local_Y,v_Vel,v_Acc,Preceding,Space_Headway,Time_Headway\n";

    fn parse(body: &str) -> Result<ParseOutcome> {
        parse_ngsim_reader(format!("{HEADER}{body}").as_bytes(), &IngestOptions::default())
    }

    #[test]
    fn single_row_is_origin() {
        let out = parse("5,100,1113433136100,6.1,100.0,30.0,0.5,0,0.0,0.0\n").unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].time, 0.0);
        assert_eq!(out.records[0].preceding_id, None);
    }

    #[test]
    fn malformed_velocity_skipped() {
        let out = parse(
            "5,100,1113433136100,6.1,100.0,30.0,0.5,0,0.0,0.0\n\
             5,101,1113433136200,6.1,103.0,abc,0.5,0,0.0,0.0\n",
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped.get("parse"), Some(&1));
        assert_eq!(out.skipped_total(), 1);
    }

    #[test]
    fn epoch_ms_to_seconds() {
        let out = parse(
            "5,7,1113433136200,6.1,106.0,30.0,0.5,0,0.0,0.0\n\
             5,9,1113433136000,6.1,100.0,30.0,0.5,0,0.0,0.0\n\
             5,8,1113433136100,6.1,103.0,30.0,0.5,0,0.0,0.0\n",
        )
        .unwrap();
        let times: Vec<f64> = out.records.iter().map(|r| r.time).collect();
        assert_eq!(times, vec![0.0, 0.1, 0.2]);
    }

    #[test]
    fn frame_ids_scaled() {
        let body = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Preceding,Space_Headway,Time_Headway\n\
                    1,10,6,0,30,0,0,0,0\n1,12,6,6,30,0,0,0,0\n";
        let out = parse_ngsim_reader(body.as_bytes(), &IngestOptions::default()).unwrap();
        assert!((out.records[1].time - 0.2).abs() < 1e-15);
    }

    #[test]
    fn schema_and_empty_errors() {
        let err = parse_ngsim_reader("Vehicle_ID,Frame_ID\n1,2\n".as_bytes(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, PrgpError::Schema(ref c) if c == "Local_X"), "{err}");
        assert!(matches!(parse(""), Err(PrgpError::EmptyData(_))));
    }

    #[test]
    fn road_bounds_rejected_with_counts() {
        let opts = IngestOptions {
            road: RoadBounds { min: 0.0, max: 200.0 },
            ..Default::default()
        };
        let body = format!(
            "{HEADER}1,1,1000,6,50,30,0,0,0,0\n1,2,1100,6,250,30,0,0,0,0\n1,3,1200,6,-1,30,0,0,0,0\n"
        );
        let out = parse_ngsim_reader(body.as_bytes(), &opts).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped.get("road_bounds"), Some(&2));
        assert!(out.records.iter().all(|r| r.local_y >= 0.0 && r.local_y <= 200.0));
    }

    #[test]
    fn canonical_round_trip() {
        let out = parse(
            "2,1,1000,6.1,10.0,30.25,0.5,1,20.5,0.68\n\
             1,1,1000,6.3,30.5,29.0,-0.1,0,0.0,0.0\n",
        )
        .unwrap();
        let mut recs = out.records;
        recs[1].preceding_velocity = Some(29.0);
        let mut buf = Vec::new();
        write_canonical_csv(&mut buf, &recs).unwrap();
        let back = read_canonical_csv(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
    }
}
