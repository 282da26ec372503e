//! Run artifacts: log row types and their CSV/JSON files.
//!
//! A run directory holds `run.json`, `scene.json`, `tracks.csv`,
//! `detections.csv`, `pollinations.csv` and `commands.csv`. Everything the
//! report needs is recoverable from these files, so offline evaluation gives
//! the same report as the simulation that produced them.

use crate::error::{Error, Result};
use crate::metrics::Thresholds;
use crate::simworld::Scene;
use crate::tracker::TrackRow;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

pub const RUN_FILE: &str = "run.json";
pub const SCENE_FILE: &str = "scene.json";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const POLLINATIONS_FILE: &str = "pollinations.csv";
pub const COMMANDS_FILE: &str = "commands.csv";

/// Arm workspace ball; flowers inside it are reachable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Run-level facts needed to evaluate the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub seed: u64,
    /// SHA-256 of the resolved config JSON.
    pub config_digest: String,
    /// Camera frames taken over the run.
    pub n_views: u64,
    /// Ticks simulated.
    pub ticks: u64,
    pub thresholds: Thresholds,
    /// `None` for runs without arms (no reachability).
    pub workspace: Option<Workspace>,
}

/// One ground-truth flower that was inside a camera's view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub tick: u64,
    pub camera_id: u32,
    pub flower_id: u32,
    pub detected: bool,
    /// Pixels, when detected.
    pub px_err: Option<f64>,
    /// Meters, when detected.
    pub trans_err: Option<f64>,
    /// Degrees between facing axes, when detected.
    pub rot_err: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PollinationRow {
    pub tick: u64,
    pub arm_id: u32,
    pub track_id: u32,
    /// Nearest reachable flower within reach of the tip, if any.
    pub flower_id: Option<u32>,
    /// First attempt on this flower; later ones do not count.
    pub counted: bool,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRow {
    pub tick: u64,
    pub arm_id: u32,
    pub mode: String,
    pub command_kind: String,
    pub target_id: Option<u32>,
    pub tip_x: f64,
    pub tip_y: f64,
    pub tip_z: f64,
    /// Tip approach axis.
    pub tip_ax: f64,
    pub tip_ay: f64,
    pub tip_az: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLogs {
    pub context: RunContext,
    pub scene: Scene<f64>,
    pub tracks: Vec<TrackRow>,
    pub detections: Vec<DetectionRow>,
    pub pollinations: Vec<PollinationRow>,
    pub commands: Vec<CommandRow>,
}

impl RunLogs {
    /// Indices of the rows holding the final track states: those at the
    /// largest logged tick.
    pub fn final_tracks(&self) -> Vec<usize> {
        let Some(last) = self.tracks.iter().map(|r| r.tick).max() else {
            return Vec::new();
        };
        (0..self.tracks.len())
            .filter(|&i| self.tracks[i].tick == last)
            .collect()
    }

    pub fn reachable_flowers(&self) -> BTreeSet<u32> {
        let Some(ws) = self.context.workspace else {
            return BTreeSet::new();
        };
        self.scene
            .flowers
            .iter()
            .filter(|f| crate::metrics::in_workspace(&f.pose.position, &ws.center, ws.radius))
            .map(|f| f.id)
            .collect()
    }

    /// Writes every artifact into `dir`, creating it if needed.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let run = serde_json::to_string_pretty(&self.context).expect("context serializes");
        fs::write(dir.join(RUN_FILE), run + "\n")?;
        fs::write(dir.join(SCENE_FILE), self.scene.to_json() + "\n")?;
        write_csv(&dir.join(TRACKS_FILE), &self.tracks)?;
        write_csv(&dir.join(DETECTIONS_FILE), &self.detections)?;
        write_csv(&dir.join(POLLINATIONS_FILE), &self.pollinations)?;
        write_csv(&dir.join(COMMANDS_FILE), &self.commands)?;
        Ok(())
    }

    /// Reads a run directory. Detection, pollination and command logs are
    /// optional and default to empty.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(RUN_FILE))?;
        let context = serde_json::from_str(&text).map_err(Error::from_json)?;
        let scene = crate::simworld::load_scene(dir.join(SCENE_FILE))?;
        let optional = |name: &str| dir.join(name).exists().then(|| dir.join(name));
        Ok(RunLogs {
            context,
            scene,
            tracks: read_csv(&dir.join(TRACKS_FILE))?,
            detections: optional(DETECTIONS_FILE)
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
            pollinations: optional(POLLINATIONS_FILE)
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
            commands: optional(COMMANDS_FILE)
                .map(|p| read_csv(&p))
                .transpose()?
                .unwrap_or_default(),
        })
    }
}

/// Serializes rows with a header line. Floats use the shortest exact
/// representation, so reading them back is lossless.
pub fn csv_string<R: Serialize>(rows: &[R]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("row serializes");
    }
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
}

/// A CSV log row type with a fixed header.
pub trait LogRow: Serialize + DeserializeOwned {
    const HEADER: &'static str;
}

impl LogRow for TrackRow {
    const HEADER: &'static str =
        "tick,track_id,x,y,z,r00,r01,r02,r10,r11,r12,r20,r21,r22,cov_trace,rot_cov,hits,pollinated";
}

impl LogRow for DetectionRow {
    const HEADER: &'static str = "tick,camera_id,flower_id,detected,px_err,trans_err,rot_err";
}

impl LogRow for PollinationRow {
    const HEADER: &'static str = "tick,arm_id,track_id,flower_id,counted,success";
}

impl LogRow for CommandRow {
    const HEADER: &'static str = "tick,arm_id,mode,command_kind,target_id,tip_x,tip_y,tip_z,tip_ax,tip_ay,tip_az";
}

pub fn write_csv<R: LogRow>(path: &Path, rows: &[R]) -> Result<()> {
    let text = if rows.is_empty() {
        // the csv writer only emits a header along with the first row
        format!("{}\n", R::HEADER)
    } else {
        csv_string(rows)
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn read_csv<R: LogRow>(path: &Path) -> Result<Vec<R>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    parse_csv(&text, &file)
}

/// Parses CSV text; malformed rows are reported with their 1-based line.
pub fn parse_csv<R: DeserializeOwned>(text: &str, file: &str) -> Result<Vec<R>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec.map_err(|e| {
            let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::SchemaMismatch {
                file: file.to_string(),
                row,
                message: e.to_string(),
            }
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(tick: u64) -> DetectionRow {
        DetectionRow {
            tick,
            camera_id: 0,
            flower_id: 3,
            detected: tick.is_multiple_of(2),
            px_err: (tick.is_multiple_of(2)).then_some(0.1 + tick as f64 / 3.0),
            trans_err: (tick.is_multiple_of(2)).then_some(1e-17 / 3.0),
            rot_err: None,
        }
    }

    #[test]
    fn headers_match_serialized_fields() {
        fn first_line<R: LogRow>(r: R) -> (String, &'static str) {
            (csv_string(&[r]).lines().next().unwrap().to_string(), R::HEADER)
        }
        let (a, b) = first_line(det(0));
        assert_eq!(a, b);
        let t = crate::tracker::Track::<f64>::spawn(
            0,
            &crate::simworld::Measurement {
                pixel: crate::camera::PixelObs {
                    u: 0.0,
                    v: 0.0,
                    ray_depth: 1.0,
                },
                position_world: nalgebra::Vector3::zeros(),
                rotation: crate::so3::Rotation::identity(),
                camera_id: 0,
                tick: 0,
                truth: None,
            },
            &Default::default(),
        );
        let (a, b) = first_line(TrackRow::from_track(0, &t));
        assert_eq!(a, b);
        let (a, b) = first_line(PollinationRow {
            tick: 0,
            arm_id: 0,
            track_id: 0,
            flower_id: None,
            counted: false,
            success: false,
        });
        assert_eq!(a, b);
        let (a, b) = first_line(CommandRow {
            tick: 0,
            arm_id: 0,
            mode: String::new(),
            command_kind: String::new(),
            target_id: None,
            tip_x: 0.0,
            tip_y: 0.0,
            tip_z: 0.0,
            tip_ax: 0.0,
            tip_ay: 0.0,
            tip_az: 0.0,
        });
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows: Vec<_> = (0..5).map(det).collect();
        let text = csv_string(&rows);
        assert!(text.starts_with("tick,camera_id,flower_id,detected,px_err,trans_err,rot_err\n"));
        let back: Vec<DetectionRow> = parse_csv(&text, "d").unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn truncated_csv_names_the_row() {
        let text = csv_string(&(0..4).map(det).collect::<Vec<_>>());
        let cut = &text[..text.len() - 12];
        match parse_csv::<DetectionRow>(cut, "detections.csv") {
            Err(Error::SchemaMismatch { file, row, .. }) => {
                assert_eq!(file, "detections.csv");
                assert_eq!(row, 5);
            }
            other => panic!("expected schema mismatch, got {other:?}"),
        }
        let bad = "tick,camera_id\n1,2\n";
        assert!(matches!(
            parse_csv::<DetectionRow>(bad, "x"),
            Err(Error::SchemaMismatch { row: 2, .. })
        ));
    }

    #[test]
    fn empty_logs_keep_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv::<TrackRow>(&p, &[]).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("tick,track_id,x,"));
        assert!(read_csv::<TrackRow>(&p).unwrap().is_empty());
    }
}
