//! Mission state machine for one eye-in-hand pollinator arm.
//!
//! Searching wanders the workspace until the tracker holds a confident,
//! unpollinated, reachable flower; the arm then moves to a standoff pose in
//! front of it, servos onto it using only fresh raw measurements, triggers the
//! pollinator and goes back to searching.

use crate::camera::{project, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::logs::Workspace;
use crate::pose::Pose;
use crate::scalar::{rad, Real};
use crate::simworld::{random_unit_vector, Measurement};
use crate::so3::{chordal_mean, project_matrix, Rotation};
use crate::tracker::{GlobalState, Track, TrackerParams};
use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommanderConfig {
    /// Proportional servo gain, `(0, 1]`.
    pub gain: f64,
    /// Largest servo translation per tick, meters.
    pub max_step: f64,
    /// Distance in front of the flower for rough localization, meters.
    pub standoff: f64,
    /// Pollination contact tolerances: meters and degrees.
    pub eps_pos: f64,
    pub eps_ang: f64,
    /// Camera sits this far behind the tip along the approach axis, meters.
    pub camera_offset: f64,
    /// Search moves, meters per tick, inside `[search_min, search_max]`.
    pub explore_step: f64,
    pub search_min: [f64; 3],
    pub search_max: [f64; 3],
    /// Point the camera looks at while searching.
    pub focus: [f64; 3],
    pub workspace: Workspace,
    /// Arm speed limits per tick for `MoveTo` and exploration.
    pub move_speed: f64,
    pub turn_speed_deg: f64,
    /// Standoff arrival tolerances: meters and degrees.
    pub arrive_pos: f64,
    pub arrive_ang: f64,
    /// Raw measurements to collect before triggering.
    pub servo_min_obs: u32,
    /// Pixel gate around the predicted target position.
    pub servo_gate_px: f64,
    /// Ticks without a gated measurement before the target counts as lost.
    pub servo_patience: u32,
    /// Tip-to-estimate alignment required to trigger: meters and degrees.
    pub servo_align_pos: f64,
    pub servo_align_ang: f64,
    /// Ticks allowed to reach the standoff pose.
    pub approach_patience: u32,
    /// Consecutive ticks without a target before giving up.
    pub search_patience: u32,
    /// A trigger touches the nearest flower within this distance of the tip.
    pub contact_radius: f64,
}

impl Default for CommanderConfig {
    fn default() -> Self {
        CommanderConfig {
            gain: 0.5,
            max_step: 0.02,
            standoff: 0.04,
            eps_pos: 0.01,
            eps_ang: 30.0,
            camera_offset: 0.10,
            explore_step: 0.03,
            search_min: [-0.15, -0.30, -0.10],
            search_max: [0.15, -0.22, 0.10],
            focus: [0.0, 0.0, 0.0],
            workspace: Workspace {
                center: [0.0, -0.45, 0.0],
                radius: 0.7,
            },
            move_speed: 0.05,
            turn_speed_deg: 30.0,
            arrive_pos: 0.002,
            arrive_ang: 2.0,
            servo_min_obs: 40,
            servo_gate_px: 60.0,
            servo_patience: 20,
            servo_align_pos: 0.001,
            servo_align_ang: 2.0,
            approach_patience: 200,
            search_patience: 600,
            contact_radius: 0.05,
        }
    }
}

impl CommanderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_step", self.max_step),
            ("standoff", self.standoff),
            ("eps_pos", self.eps_pos),
            ("eps_ang", self.eps_ang),
            ("explore_step", self.explore_step),
            ("workspace.radius", self.workspace.radius),
            ("move_speed", self.move_speed),
            ("turn_speed_deg", self.turn_speed_deg),
            ("arrive_pos", self.arrive_pos),
            ("arrive_ang", self.arrive_ang),
            ("servo_gate_px", self.servo_gate_px),
            ("servo_align_pos", self.servo_align_pos),
            ("servo_align_ang", self.servo_align_ang),
            ("contact_radius", self.contact_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("commander.{name}"), "must be positive"));
            }
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::config("commander.gain", "must be in (0, 1]"));
        }
        if !(self.camera_offset >= 0.0) {
            return Err(Error::config("commander.camera_offset", "must be non-negative"));
        }
        if (0..3).any(|i| !(self.search_min[i] <= self.search_max[i])) {
            return Err(Error::config("commander.search_min", "must not exceed search_max"));
        }
        if self.servo_min_obs == 0 {
            return Err(Error::config("commander.servo_min_obs", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Searching,
    RoughLocalization(u32),
    VisualServo(u32),
    Done,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Searching => "searching",
            Mode::RoughLocalization(_) => "rough_localization",
            Mode::VisualServo(_) => "visual_servo",
            Mode::Done => "done",
        }
    }

    pub fn target(&self) -> Option<u32> {
        match *self {
            Mode::RoughLocalization(id) | Mode::VisualServo(id) => Some(id),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Command<T: Real> {
    /// Move along a unit direction.
    Explore(Vector3<T>),
    MoveTo(Pose<T>),
    /// World-frame translation, then world-frame rotation of the tip.
    MoveDelta {
        translation: Vector3<T>,
        rotation: Rotation<T>,
    },
    TriggerPollinate(u32),
    Idle,
}

impl<T: Real> Command<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::Explore(_) => "explore",
            Command::MoveTo(_) => "move_to",
            Command::MoveDelta { .. } => "move_delta",
            Command::TriggerPollinate(_) => "trigger_pollinate",
            Command::Idle => "idle",
        }
    }
}

/// Pollinator tip pose plus the rigidly attached camera. The tool points
/// along the tip's +z; the camera looks the same way from behind the tip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmState<T: Real> {
    pub tip: Pose<T>,
    pub camera_offset: T,
}

impl<T: Real> ArmState<T> {
    pub fn camera(&self) -> CameraPose<T> {
        let z = self.tip.rotation.z_axis();
        CameraPose::new(Pose::new(self.tip.position - z * self.camera_offset, self.tip.rotation))
    }
}

fn angle_between<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    a.cross(b).norm().atan2(a.dot(b))
}

/// The rotation taking `from` to `to` about their common normal, as
/// `(axis, angle)`. Antiparallel inputs turn about `fallback`.
fn arc<T: Real>(from: &Vector3<T>, to: &Vector3<T>, fallback: &Vector3<T>) -> Option<(Vector3<T>, T)> {
    let c = from.cross(to);
    let n = c.norm();
    let angle = n.atan2(from.dot(to));
    if n > T::lit(1e-12) {
        Some((c / n, angle))
    } else if from.dot(to) < T::zero() {
        Some((*fallback, T::pi()))
    } else {
        None
    }
}

/// `r` turned minimally so that its z-axis points along `dir`.
pub fn aim<T: Real>(r: &Rotation<T>, dir: &Vector3<T>) -> Rotation<T> {
    let d = dir.normalize();
    match arc(&r.z_axis(), &d, &r.column(0)) {
        Some((axis, angle)) => Rotation::from_axis_angle(&axis, angle) * *r,
        None => *r,
    }
}

/// Rough-localization goal: `standoff` in front of the flower, tool axis
/// pointing into it, twist kept close to `current`.
pub fn standoff_pose<T: Real>(flower: &Pose<T>, current: &Rotation<T>, standoff: T) -> Pose<T> {
    let z = flower.rotation.z_axis();
    Pose::new(flower.position + z * standoff, aim(current, &(-z)))
}

/// Proportional step toward contact with `target`: translation
/// `clamp(gain·Δx, max_step)`, rotation turning the tip's −z toward the
/// flower's +z by `gain` of the shortest arc.
pub fn servo_delta<T: Real>(tip: &Pose<T>, target: &Pose<T>, gain: T, max_step: T) -> (Vector3<T>, Rotation<T>) {
    let mut translation = (target.position - tip.position) * gain;
    let len = translation.norm();
    if len > max_step {
        translation *= max_step / len;
    }
    let from = -tip.rotation.z_axis();
    let rotation = match arc(&from, &target.rotation.z_axis(), &tip.rotation.column(0)) {
        Some((axis, angle)) => Rotation::from_axis_angle(&axis, angle * gain),
        None => Rotation::identity(),
    };
    (translation, rotation)
}

/// Tip within `eps_pos` of the flower and its −z within `eps_ang` degrees of
/// the flower's facing axis.
pub fn check_pollination<T: Real>(tip: &Pose<T>, flower: &Pose<T>, eps_pos: f64, eps_ang: f64) -> bool {
    aligned(tip, flower, eps_pos, eps_ang)
}

fn aligned<T: Real>(tip: &Pose<T>, target: &Pose<T>, pos: f64, ang_deg: f64) -> bool {
    let d = (tip.position - target.position).norm();
    let a = angle_between(&(-tip.rotation.z_axis()), &target.rotation.z_axis());
    d <= T::lit(pos) && a <= T::lit(rad(ang_deg))
}

fn arrived<T: Real>(tip: &Pose<T>, goal: &Pose<T>, cfg: &CommanderConfig) -> bool {
    let d = (tip.position - goal.position).norm();
    let a = angle_between(&tip.rotation.z_axis(), &goal.rotation.z_axis());
    d <= T::lit(cfg.arrive_pos) && a <= T::lit(rad(cfg.arrive_ang))
}

fn track_pose<T: Real>(t: &Track<T>) -> Pose<T> {
    Pose::new(t.pos_mean, t.rot_mean)
}

/// Nearest track the arm may pursue: confident, unpollinated, unclaimed by
/// other arms, inside the workspace, and not a duplicate of a pollinated
/// track.
pub fn select_target<T: Real>(
    gs: &GlobalState<T>,
    tip: &Vector3<T>,
    arm_id: u32,
    cfg: &CommanderConfig,
    tp: &TrackerParams,
) -> Option<u32> {
    let center = Vector3::from(cfg.workspace.center).map(T::lit);
    let gate = T::lit(tp.association_threshold);
    gs.tracks
        .iter()
        .filter(|t| t.is_confident(tp) && !t.pollinated && !gs.claimed_by_other(t.id, arm_id))
        .filter(|t| (t.pos_mean - center).norm() <= T::lit(cfg.workspace.radius))
        .filter(|t| {
            !gs.tracks
                .iter()
                .any(|p| p.pollinated && (p.pos_mean - t.pos_mean).norm() <= gate)
        })
        .map(|t| ((t.pos_mean - tip).norm(), t.id))
        .min_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        })
        .map(|(_, id)| id)
}

/// Raw measurements of the servo target collected since servoing began.
#[derive(Debug, Clone, Default)]
struct ServoWindow<T: Real> {
    sum: Vector3<T>,
    rotations: Vec<Rotation<T>>,
    idle: u32,
}

impl<T: Real> ServoWindow<T> {
    fn count(&self) -> u32 {
        self.rotations.len() as u32
    }

    fn estimate(&self) -> Result<Option<Pose<T>>> {
        if self.rotations.is_empty() {
            return Ok(None);
        }
        let n = T::lit(self.rotations.len() as f64);
        let w = vec![T::one(); self.rotations.len()];
        Ok(Some(Pose::new(self.sum / n, chordal_mean(&self.rotations, &w)?)))
    }
}

/// One arm's commander.
#[derive(Debug, Clone)]
pub struct Commander<T: Real> {
    pub arm_id: u32,
    mode: Mode,
    stall: u32,
    servo: ServoWindow<T>,
}

impl<T: Real> Commander<T> {
    pub fn new(arm_id: u32) -> Self {
        Commander {
            arm_id,
            mode: Mode::Searching,
            stall: 0,
            servo: ServoWindow {
                sum: Vector3::zeros(),
                rotations: Vec::new(),
                idle: 0,
            },
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn enter(&mut self, mode: Mode) {
        self.mode = mode;
        self.stall = 0;
        self.servo = ServoWindow {
            sum: Vector3::zeros(),
            rotations: Vec::new(),
            idle: 0,
        };
    }

    fn lose(&mut self, id: u32) -> Error {
        self.enter(Mode::Searching);
        Error::TargetLost(id)
    }

    /// Advances the state machine by one tick.
    ///
    /// `fresh` is the batch this arm's camera produced this tick. On
    /// [`Error::TargetLost`] the commander has already returned to
    /// searching.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        gs: &GlobalState<T>,
        arm: &ArmState<T>,
        fresh: &[Measurement<T>],
        k: &Intrinsics,
        cfg: &CommanderConfig,
        tp: &TrackerParams,
        rng: &mut impl Rng,
    ) -> Result<Command<T>> {
        match self.mode {
            Mode::Done => Ok(Command::Idle),
            Mode::Searching => match select_target(gs, &arm.tip.position, self.arm_id, cfg, tp) {
                Some(id) => {
                    self.enter(Mode::RoughLocalization(id));
                    let t = gs.get(id).expect("selected track exists");
                    Ok(Command::MoveTo(standoff_pose(
                        &track_pose(t),
                        &arm.tip.rotation,
                        T::lit(cfg.standoff),
                    )))
                }
                None => {
                    self.stall += 1;
                    if self.stall >= cfg.search_patience {
                        self.enter(Mode::Done);
                        return Ok(Command::Idle);
                    }
                    Ok(Command::Explore(random_unit_vector(rng).map(T::lit)))
                }
            },
            Mode::RoughLocalization(id) => {
                let Some(t) = gs.get(id) else {
                    return Err(self.lose(id));
                };
                let goal = standoff_pose(&track_pose(t), &arm.tip.rotation, T::lit(cfg.standoff));
                if arrived(&arm.tip, &goal, cfg) {
                    self.enter(Mode::VisualServo(id));
                    return self.servo_step(id, t, arm, fresh, k, cfg);
                }
                self.stall += 1;
                if self.stall > cfg.approach_patience {
                    return Err(self.lose(id));
                }
                Ok(Command::MoveTo(goal))
            }
            Mode::VisualServo(id) => {
                let Some(t) = gs.get(id) else {
                    return Err(self.lose(id));
                };
                self.servo_step(id, t, arm, fresh, k, cfg)
            }
        }
    }

    fn servo_step(
        &mut self,
        id: u32,
        track: &Track<T>,
        arm: &ArmState<T>,
        fresh: &[Measurement<T>],
        k: &Intrinsics,
        cfg: &CommanderConfig,
    ) -> Result<Command<T>> {
        let prior = self.servo.estimate()?.unwrap_or_else(|| track_pose(track));
        let cam = arm.camera();
        let gated = project(&prior.position, &cam, k).and_then(|pred| {
            fresh
                .iter()
                .map(|m| {
                    let du = m.pixel.u - pred.u;
                    let dv = m.pixel.v - pred.v;
                    ((du * du + dv * dv).sqrt(), m)
                })
                .filter(|(d, _)| *d <= T::lit(cfg.servo_gate_px))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(_, m)| m)
        });
        match gated {
            Some(m) => {
                self.servo.sum += m.position_world;
                self.servo.rotations.push(m.rotation);
                self.servo.idle = 0;
            }
            None => {
                self.servo.idle += 1;
                if self.servo.idle > cfg.servo_patience {
                    return Err(self.lose(id));
                }
            }
        }
        let target = self.servo.estimate()?.unwrap_or(prior);
        if self.servo.count() >= cfg.servo_min_obs
            && aligned(&arm.tip, &target, cfg.servo_align_pos, cfg.servo_align_ang)
        {
            self.enter(Mode::Searching);
            return Ok(Command::TriggerPollinate(id));
        }
        let (translation, rotation) = servo_delta(&arm.tip, &target, T::lit(cfg.gain), T::lit(cfg.max_step));
        Ok(Command::MoveDelta { translation, rotation })
    }
}

/// Moves `from` toward `goal`, limited to `speed` meters and `turn_deg`
/// degrees.
pub fn move_toward<T: Real>(from: &Pose<T>, goal: &Pose<T>, speed: f64, turn_deg: f64) -> Pose<T> {
    let mut step = goal.position - from.position;
    let len = step.norm();
    if len > T::lit(speed) {
        step *= T::lit(speed) / len;
    }
    let rel = *goal.rotation.matrix() * from.rotation.matrix().transpose();
    let rotation = match Rotation3::from_matrix_unchecked(rel).axis_angle() {
        Some((axis, angle)) if angle > T::lit(rad(turn_deg)) => {
            Rotation::from_axis_angle(&axis.into_inner(), T::lit(rad(turn_deg))) * from.rotation
        }
        _ => goal.rotation,
    };
    Pose::new(from.position + step, rotation)
}

/// Reflects `p` back inside the box, then clamps whatever is still outside.
pub fn reflect_into<T: Real>(p: &Vector3<T>, lo: &[f64; 3], hi: &[f64; 3]) -> Vector3<T> {
    Vector3::from_fn(|i, _| {
        let (a, b) = (T::lit(lo[i]), T::lit(hi[i]));
        let mut x = p[i];
        if x > b {
            x = b + b - x;
        }
        if x < a {
            x = a + a - x;
        }
        x.max(a).min(b)
    })
}

/// Tip pose after executing `cmd`. Triggering and idling leave it in place.
pub fn apply_command<T: Real>(tip: &Pose<T>, cmd: &Command<T>, cfg: &CommanderConfig) -> Result<Pose<T>> {
    Ok(match cmd {
        Command::Explore(dir) => {
            let p = reflect_into(
                &(tip.position + dir * T::lit(cfg.explore_step)),
                &cfg.search_min,
                &cfg.search_max,
            );
            let focus = Vector3::from(cfg.focus).map(T::lit);
            let goal_rot = match Rotation::look_along(&(focus - p), &Vector3::z()) {
                Ok(r) => r,
                Err(_) => tip.rotation,
            };
            move_toward(tip, &Pose::new(p, goal_rot), cfg.move_speed, cfg.turn_speed_deg)
        }
        Command::MoveTo(goal) => move_toward(tip, goal, cfg.move_speed, cfg.turn_speed_deg),
        Command::MoveDelta { translation, rotation } => Pose::new(
            tip.position + translation,
            project_matrix(&(*rotation.matrix() * tip.rotation.matrix()))?,
        ),
        Command::TriggerPollinate(_) | Command::Idle => *tip,
    })
}

/// Starting tip pose: center of the search box, looking at the focus.
pub fn home_pose<T: Real>(cfg: &CommanderConfig) -> Pose<T> {
    let c = Vector3::from_fn(|i, _| T::lit((cfg.search_min[i] + cfg.search_max[i]) / 2.0));
    let focus = Vector3::from(cfg.focus).map(T::lit);
    let r = Rotation::look_along(&(focus - c), &Vector3::z()).unwrap_or_else(|_| Rotation::identity());
    Pose::new(c, r)
}
