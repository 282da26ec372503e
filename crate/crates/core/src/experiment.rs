//! Experiment configuration and the simulation loops.
//!
//! Two experiments are available. `pollinate` runs the full closed loop for
//! one or more arms: observe, ingest, commander step, arm motion. `refine`
//! only estimates poses: every flower is viewed from a fixed number of
//! random viewpoints and the measurements are fused.

use crate::camera::{project, CameraPose, Intrinsics};
use crate::commander::{apply_command, check_pollination, home_pose, ArmState, Command, Commander, CommanderConfig};
use crate::error::{Error, Result};
use crate::logs::{CommandRow, DetectionRow, PollinationRow, RunContext, RunLogs, Workspace};
use crate::metrics::{aggregate, in_workspace, RunReport, Thresholds};
use crate::pose::Pose;
use crate::simworld::{
    gen_scene, load_scene, observe, stream_rng, streams, FlowerGT, Measurement, NoiseModel, Scene, SceneGenParams,
    ViewpointProtocol,
};
use crate::so3::zaxis_angle;
use crate::tracker::{GlobalState, IngestSummary, TrackRow, TrackerParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest accepted rotation residual of a filtered track.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    #[default]
    Pollinate,
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneSource {
    /// Scene JSON file, relative paths resolved against the config file.
    Path(PathBuf),
    Generate(SceneGenParams),
}

impl Default for SceneSource {
    fn default() -> Self {
        SceneSource::Generate(SceneGenParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub scene: SceneSource,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub tracker: TrackerParams,
    #[serde(default)]
    pub commander: CommanderConfig,
    #[serde(default = "Intrinsics::default_test")]
    pub intrinsics: Intrinsics,
    #[serde(default = "default_arms")]
    pub arms: u32,
    #[serde(default = "default_step_budget")]
    pub step_budget: u64,
    #[serde(default = "default_viewpoints_per_flower")]
    pub viewpoints_per_flower: u32,
    #[serde(default)]
    pub viewpoints: ViewpointProtocol,
    #[serde(default)]
    pub thresholds: Thresholds,
}

fn default_arms() -> u32 {
    1
}

fn default_step_budget() -> u64 {
    3000
}

fn default_viewpoints_per_flower() -> u32 {
    20
}

pub const MAX_ARMS: u32 = 64;

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed,
            experiment: ExperimentKind::default(),
            scene: SceneSource::default(),
            noise: NoiseModel::default(),
            tracker: TrackerParams::default(),
            commander: CommanderConfig::default(),
            intrinsics: Intrinsics::default_test(),
            arms: default_arms(),
            step_budget: default_step_budget(),
            viewpoints_per_flower: default_viewpoints_per_flower(),
            viewpoints: ViewpointProtocol::default(),
            thresholds: Thresholds::default(),
        }
    }

    /// Parses and validates. Unknown or ill-typed fields are reported by
    /// their dotted path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            match inner.classify() {
                serde_json::error::Category::Data => Error::config(path, inner.to_string()),
                _ => Error::from_json(inner),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative scene path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        if let SceneSource::Path(p) = &mut cfg.scene {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.arms == 0 || self.arms > MAX_ARMS {
            return Err(Error::config("arms", format!("must lie in 1..={MAX_ARMS}")));
        }
        if self.step_budget == 0 {
            return Err(Error::config("step_budget", "must be positive"));
        }
        if self.viewpoints_per_flower == 0 {
            return Err(Error::config("viewpoints_per_flower", "must be positive"));
        }
        if let SceneSource::Generate(g) = &self.scene {
            g.validate()?;
        }
        self.noise.validate()?;
        self.tracker.validate()?;
        self.commander.validate()?;
        self.viewpoints.validate()?;
        self.thresholds.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn resolve_scene(&self) -> Result<Scene<f64>> {
        match &self.scene {
            SceneSource::Path(p) => load_scene(p),
            SceneSource::Generate(g) => gen_scene(&mut stream_rng(self.seed, streams::SCENE), g),
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub logs: RunLogs,
    pub report: RunReport,
    pub final_state: GlobalState<f64>,
    /// Largest rotation residual seen after any tracker update.
    pub max_rot_residual: f64,
    /// Tracker updates checked for the rotation invariant.
    pub rot_checks: u64,
    pub targets_lost: u64,
}

pub fn run(cfg: &ExperimentConfig, scene: &Scene<f64>) -> Result<RunOutcome> {
    match cfg.experiment {
        ExperimentKind::Pollinate => run_pollinate(cfg, scene),
        ExperimentKind::Refine => run_refine(cfg, scene),
    }
}

/// Detection log rows for every flower inside the camera's view.
pub fn detection_rows(
    scene: &[FlowerGT<f64>],
    cam: &CameraPose<f64>,
    k: &Intrinsics,
    ms: &[Measurement<f64>],
    tick: u64,
    camera_id: u32,
) -> Vec<DetectionRow> {
    let mut rows = Vec::new();
    for f in scene {
        let Some(px) = project(&f.pose.position, cam, k) else {
            continue;
        };
        let m = ms.iter().find(|m| m.truth == Some(f.id));
        rows.push(DetectionRow {
            tick,
            camera_id,
            flower_id: f.id,
            detected: m.is_some(),
            px_err: m.map(|m| (m.pixel.u - px.u).hypot(m.pixel.v - px.v)),
            trans_err: m.map(|m| (m.position_world - f.pose.position).norm()),
            rot_err: m.map(|m| zaxis_angle(&m.rotation, &f.pose.rotation)),
        });
    }
    rows
}

struct Recorder {
    tracks: Vec<TrackRow>,
    detections: Vec<DetectionRow>,
    max_rot_residual: f64,
    rot_checks: u64,
}

impl Recorder {
    fn new() -> Self {
        Recorder {
            tracks: Vec::new(),
            detections: Vec::new(),
            max_rot_residual: 0.0,
            rot_checks: 0,
        }
    }

    fn ingested(&mut self, gs: &GlobalState<f64>, s: &IngestSummary, tick: u64) -> Result<()> {
        self.rot_checks += (s.updated.len() + s.spawned.len()) as u64;
        self.max_rot_residual = self.max_rot_residual.max(s.max_rot_residual);
        if s.max_rot_residual > ROTATION_TOLERANCE {
            return Err(Error::Runtime(format!(
                "track rotation left SO(3) at tick {tick}: residual {:e}",
                s.max_rot_residual
            )));
        }
        let changed: BTreeSet<u32> = s.updated.iter().chain(&s.spawned).copied().collect();
        for id in changed {
            if let Some(t) = gs.get(id) {
                self.tracks.push(TrackRow::from_track(tick, t));
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, gs: &GlobalState<f64>, tick: u64) {
        for t in &gs.tracks {
            self.tracks.push(TrackRow::from_track(tick, t));
        }
    }
}

/// Views every flower from `viewpoints_per_flower` random cameras and fuses
/// all measurements.
pub fn run_refine(cfg: &ExperimentConfig, scene: &Scene<f64>) -> Result<RunOutcome> {
    let mut gs = GlobalState::new();
    let mut cam_rng = stream_rng(cfg.seed, 0);
    let mut view_rng = stream_rng(cfg.seed, streams::VIEWPOINTS);
    let mut rec = Recorder::new();
    let mut tick = 0u64;
    for f in &scene.flowers {
        for _ in 0..cfg.viewpoints_per_flower {
            let cam = cfg.viewpoints.sample(&mut view_rng, &f.pose.position);
            let ms = observe(&scene.flowers, &cam, &cfg.intrinsics, &cfg.noise, &mut cam_rng, 0, tick);
            rec.detections
                .extend(detection_rows(&scene.flowers, &cam, &cfg.intrinsics, &ms, tick, 0));
            let s = gs.ingest(&ms, tick, &cfg.tracker)?;
            rec.ingested(&gs, &s, tick)?;
            tick += 1;
        }
    }
    rec.snapshot(&gs, tick);
    finish(cfg, scene, rec, gs, Vec::new(), Vec::new(), tick, tick, None, 0)
}

/// Closed-loop pollination with `cfg.arms` arms scheduled round-robin.
pub fn run_pollinate(cfg: &ExperimentConfig, scene: &Scene<f64>) -> Result<RunOutcome> {
    let c = &cfg.commander;
    let n_arms = cfg.arms;
    let mut gs = GlobalState::new();
    let mut arms: Vec<ArmState<f64>> = (0..n_arms)
        .map(|_| ArmState {
            tip: home_pose(c),
            camera_offset: c.camera_offset,
        })
        .collect();
    let mut commanders: Vec<Commander<f64>> = (0..n_arms).map(Commander::new).collect();
    let mut cam_rngs: Vec<_> = (0..n_arms).map(|a| stream_rng(cfg.seed, a as u64)).collect();
    let mut cmd_rngs: Vec<_> = (0..n_arms)
        .map(|a| stream_rng(cfg.seed, streams::COMMANDER + a as u64))
        .collect();
    let reachable: BTreeSet<u32> = scene
        .flowers
        .iter()
        .filter(|f| in_workspace(&f.pose.position, &c.workspace.center, c.workspace.radius))
        .map(|f| f.id)
        .collect();

    let mut rec = Recorder::new();
    let mut commands = Vec::new();
    let mut pollinations = Vec::new();
    let mut attempted = BTreeSet::new();
    let mut targets_lost = 0;
    let mut tick = 0;
    while tick < cfg.step_budget {
        if commanders.iter().all(|c| c.mode() == crate::commander::Mode::Done) {
            break;
        }
        for a in 0..n_arms as usize {
            let arm_id = a as u32;
            let cam = arms[a].camera();
            let ms = observe(
                &scene.flowers,
                &cam,
                &cfg.intrinsics,
                &cfg.noise,
                &mut cam_rngs[a],
                arm_id,
                tick,
            );
            rec.detections
                .extend(detection_rows(&scene.flowers, &cam, &cfg.intrinsics, &ms, tick, arm_id));
            let s = gs.ingest(&ms, tick, &cfg.tracker)?;
            rec.ingested(&gs, &s, tick)?;

            let cmd = match commanders[a].step(&gs, &arms[a], &ms, &cfg.intrinsics, c, &cfg.tracker, &mut cmd_rngs[a]) {
                Ok(cmd) => cmd,
                Err(Error::TargetLost(id)) => {
                    log::debug!("tick {tick}: arm {arm_id} lost track {id}");
                    targets_lost += 1;
                    Command::Idle
                }
                Err(e) => return Err(e),
            };
            match commanders[a].mode().target() {
                Some(id) => {
                    if !gs.claim(id, arm_id) {
                        return Err(Error::Runtime(format!(
                            "arm {arm_id} pursued track {id} claimed elsewhere"
                        )));
                    }
                }
                None => gs.release(arm_id),
            }
            if let Command::TriggerPollinate(id) = cmd {
                let tip = arms[a].tip;
                gs.mark_pollinated(id);
                if let Some(t) = gs.get(id) {
                    rec.tracks.push(TrackRow::from_track(tick, t));
                }
                let touched = nearest_flower(scene, &tip, c.contact_radius);
                let counted = touched.is_some_and(|f| reachable.contains(&f.id) && attempted.insert(f.id));
                let success = touched.is_some_and(|f| check_pollination(&tip, &f.pose, c.eps_pos, c.eps_ang));
                log::debug!(
                    "tick {tick}: arm {arm_id} pollinated track {id} (flower {:?}, success {success})",
                    touched.map(|f| f.id)
                );
                pollinations.push(PollinationRow {
                    tick,
                    arm_id,
                    track_id: id,
                    flower_id: touched.map(|f| f.id),
                    counted,
                    success,
                });
            }
            arms[a].tip = apply_command(&arms[a].tip, &cmd, c)?;
            let tip = arms[a].tip;
            let axis = tip.rotation.z_axis();
            commands.push(CommandRow {
                tick,
                arm_id,
                mode: commanders[a].mode().name().to_string(),
                command_kind: cmd.kind().to_string(),
                target_id: match cmd {
                    Command::TriggerPollinate(id) => Some(id),
                    _ => commanders[a].mode().target(),
                },
                tip_x: tip.position.x,
                tip_y: tip.position.y,
                tip_z: tip.position.z,
                tip_ax: axis.x,
                tip_ay: axis.y,
                tip_az: axis.z,
            });
        }
        tick += 1;
    }
    rec.snapshot(&gs, tick);
    let views = tick * n_arms as u64;
    finish(
        cfg,
        scene,
        rec,
        gs,
        pollinations,
        commands,
        views,
        tick,
        Some(c.workspace),
        targets_lost,
    )
}

fn nearest_flower<'a>(scene: &'a Scene<f64>, tip: &Pose<f64>, radius: f64) -> Option<&'a FlowerGT<f64>> {
    scene
        .flowers
        .iter()
        .map(|f| ((f.pose.position - tip.position).norm(), f))
        .filter(|(d, _)| *d <= radius)
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)))
        .map(|(_, f)| f)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &ExperimentConfig,
    scene: &Scene<f64>,
    rec: Recorder,
    gs: GlobalState<f64>,
    pollinations: Vec<PollinationRow>,
    commands: Vec<CommandRow>,
    n_views: u64,
    ticks: u64,
    workspace: Option<Workspace>,
    targets_lost: u64,
) -> Result<RunOutcome> {
    let logs = RunLogs {
        context: RunContext {
            seed: cfg.seed,
            config_digest: cfg.digest(),
            n_views,
            ticks,
            thresholds: cfg.thresholds,
            workspace,
        },
        scene: scene.clone(),
        tracks: rec.tracks,
        detections: rec.detections,
        pollinations,
        commands,
    };
    let report = aggregate(&logs)?;
    Ok(RunOutcome {
        logs,
        report,
        final_state: gs,
        max_rot_residual: rec.max_rot_residual,
        rot_checks: rec.rot_checks,
        targets_lost,
    })
}

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Writes logs, the resolved config and the report into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &RunOutcome) -> Result<()> {
    out.logs.write_dir(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    write_report(dir, &out.report)
}

pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_CSV), crate::logs::csv_string(&[report.row()]))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(dir.join(REPORT_JSON), json + "\n")?;
    fs::write(dir.join(SUMMARY_FILE), report.summary_table())?;
    Ok(())
}

/// Recomputes the report of a run directory from its logs.
pub fn evaluate_dir(dir: &Path) -> Result<RunReport> {
    aggregate(&RunLogs::read_dir(dir)?)
}
