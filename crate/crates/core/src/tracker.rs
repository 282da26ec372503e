//! Global flower map: per-flower Kalman filtering plus nearest-neighbour
//! data association.
//!
//! Flowers are static, so prediction only inflates covariances. Position is a
//! plain linear Kalman filter in R³ with identity observation model. Rotation
//! is filtered in R⁹ (the flattened matrix) with an isotropic scalar variance
//! and projected back onto SO(3) after every update.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::simworld::Measurement;
use crate::so3::{svd_project, NineVec, Rotation};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerParams {
    /// Association gate, meters.
    pub association_threshold: f64,
    /// Initial position variance per axis, m².
    pub init_pos_var: f64,
    /// Initial rotation variance (R⁹ coordinates).
    pub init_rot_var: f64,
    /// Position process noise per tick, m².
    pub q_pos: f64,
    /// Rotation process noise per tick.
    pub q_rot: f64,
    /// Position measurement variance per axis, m².
    pub r_pos: f64,
    /// Rotation measurement variance (R⁹ coordinates).
    pub r_rot: f64,
    /// A track is confident when `trace(pos_cov) < confident_trace` ...
    pub confident_trace: f64,
    /// ... and it has fused at least this many measurements.
    pub confident_hits: u32,
    /// Tracks unseen for this many ticks with fewer than `stale_max_hits`
    /// hits are dropped.
    pub stale_ticks: u64,
    pub stale_max_hits: u32,
}

/// Per-coordinate R⁹ variance of the default calibrated rotation noise,
/// `E[‖R̃ − R‖²_F] / 9` for a 48.67° folded-Gaussian axis-angle perturbation.
pub const DEFAULT_ROT_VAR: f64 = 0.1346;

impl Default for TrackerParams {
    fn default() -> Self {
        TrackerParams {
            association_threshold: 0.05,
            init_pos_var: 0.03 * 0.03,
            init_rot_var: DEFAULT_ROT_VAR,
            q_pos: 0.001 * 0.001,
            q_rot: 1e-4,
            r_pos: 5e-4,
            r_rot: DEFAULT_ROT_VAR,
            confident_trace: 0.01 * 0.01,
            confident_hits: 3,
            stale_ticks: 500,
            stale_max_hits: 3,
        }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("association_threshold", self.association_threshold),
            ("init_pos_var", self.init_pos_var),
            ("init_rot_var", self.init_rot_var),
            ("r_pos", self.r_pos),
            ("r_rot", self.r_rot),
            ("confident_trace", self.confident_trace),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tracker.{name}"), "must be positive"));
            }
        }
        for (name, v) in [("q_pos", self.q_pos), ("q_rot", self.q_rot)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("tracker.{name}"), "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Filtered belief about one flower.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Track<T: Real> {
    pub id: u32,
    pub pos_mean: Vector3<T>,
    pub pos_cov: Matrix3<T>,
    pub rot_mean: Rotation<T>,
    pub rot_cov: T,
    pub hits: u32,
    pub last_tick: u64,
    pub pollinated: bool,
}

impl<T: Real> Track<T> {
    pub fn spawn(id: u32, m: &Measurement<T>, p: &TrackerParams) -> Self {
        Track {
            id,
            pos_mean: m.position_world,
            pos_cov: Matrix3::identity() * T::lit(p.init_pos_var),
            rot_mean: m.rotation,
            rot_cov: T::lit(p.init_rot_var),
            hits: 1,
            last_tick: m.tick,
            pollinated: false,
        }
    }

    pub fn confidence(&self) -> T {
        self.pos_cov.trace()
    }

    pub fn is_confident(&self, p: &TrackerParams) -> bool {
        self.confidence() < T::lit(p.confident_trace) && self.hits >= p.confident_hits
    }
}

/// Static-state prediction over `ticks` steps: means unchanged, variances
/// grow linearly.
pub fn predict<T: Real>(t: &Track<T>, ticks: u64, q_pos: f64, q_rot: f64) -> Track<T> {
    let dt = T::lit(ticks as f64);
    Track {
        pos_cov: t.pos_cov + Matrix3::identity() * (dt * T::lit(q_pos)),
        rot_cov: t.rot_cov + dt * T::lit(q_rot),
        ..*t
    }
}

/// Linear Kalman update with `H = I`, `R = r_meas · I`.
pub fn update_position<T: Real>(t: &Track<T>, z: &Vector3<T>, r_meas: T) -> Track<T> {
    let p = t.pos_cov;
    let s = p + Matrix3::identity() * r_meas;
    let s_inv = s
        .cholesky()
        .expect("P + R is positive definite for r_meas > 0")
        .inverse();
    let gain = p * s_inv;
    let cov = (Matrix3::identity() - gain) * p;
    Track {
        pos_mean: t.pos_mean + gain * (z - t.pos_mean),
        pos_cov: (cov + cov.transpose()) / T::lit(2.0),
        ..*t
    }
}

/// Scalar-gain update of the flattened rotation followed by SVD projection.
pub fn update_rotation<T: Real>(t: &Track<T>, z: &Rotation<T>, r_meas: T) -> Result<Track<T>> {
    let k = t.rot_cov / (t.rot_cov + r_meas);
    let s = t.rot_mean.flatten().0;
    let zf = z.flatten().0;
    let blended = NineVec(std::array::from_fn(|i| s[i] + k * (zf[i] - s[i])));
    Ok(Track {
        rot_mean: svd_project(&blended)?,
        rot_cov: (T::one() - k) * t.rot_cov,
        ..*t
    })
}

/// Result of associating one measurement batch.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// `(measurement index, track id)`, sorted by measurement index.
    pub pairs: Vec<(usize, u32)>,
    /// Measurement indices that start new tracks, ascending.
    pub spawns: Vec<usize>,
}

/// Greedy global nearest neighbour on raw points.
///
/// Repeatedly commits the closest remaining (measurement, track) pair whose
/// distance is within `threshold`; ties go to the lower track id, then the
/// lower measurement index.
pub fn associate_points<T: Real>(points: &[Vector3<T>], tracks: &[(u32, Vector3<T>)], threshold: T) -> Assignment {
    let mut candidates = Vec::new();
    for (mi, z) in points.iter().enumerate() {
        for (tid, pos) in tracks {
            let d = (z - pos).norm();
            if d <= threshold {
                candidates.push((d, *tid, mi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut used_m = vec![false; points.len()];
    let mut used_t = BTreeSet::new();
    let mut pairs = Vec::new();
    for (_, tid, mi) in candidates {
        if used_m[mi] || used_t.contains(&tid) {
            continue;
        }
        used_m[mi] = true;
        used_t.insert(tid);
        pairs.push((mi, tid));
    }
    pairs.sort_unstable();
    let spawns = (0..points.len()).filter(|&i| !used_m[i]).collect();
    Assignment { pairs, spawns }
}

pub fn associate<T: Real>(ms: &[Measurement<T>], gs: &GlobalState<T>, threshold: f64) -> Assignment {
    let points: Vec<_> = ms.iter().map(|m| m.position_world).collect();
    let tracks: Vec<_> = gs.tracks.iter().map(|t| (t.id, t.pos_mean)).collect();
    associate_points(&points, &tracks, T::lit(threshold))
}

/// What one [`GlobalState::ingest`] call did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestSummary {
    pub assignment: Assignment,
    /// Ids of tracks updated by this batch.
    pub updated: Vec<u32>,
    pub spawned: Vec<u32>,
    pub pruned: Vec<u32>,
    /// Largest rotation-invariant residual over the updated and spawned tracks.
    pub max_rot_residual: f64,
}

/// All flower tracks plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct GlobalState<T: Real> {
    pub tracks: Vec<Track<T>>,
    pub next_id: u32,
    /// Tick the covariances have been predicted to.
    pub tick: u64,
    /// Track id -> arm currently pursuing it.
    pub claims: BTreeMap<u32, u32>,
}

impl<T: Real> Default for GlobalState<T> {
    fn default() -> Self {
        GlobalState {
            tracks: Vec::new(),
            next_id: 0,
            tick: 0,
            claims: BTreeMap::new(),
        }
    }
}

impl<T: Real> GlobalState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: u32) -> Option<&Track<T>> {
        self.tracks.iter().find(|t| t.id == id)
    }

    /// Applies one measurement batch taken at `tick`: predict, associate,
    /// update matched tracks, spawn the rest, prune stale tracks.
    ///
    /// The state is left untouched if any update fails.
    pub fn ingest(&mut self, ms: &[Measurement<T>], tick: u64, p: &TrackerParams) -> Result<IngestSummary> {
        let dt = tick.saturating_sub(self.tick);
        let mut tracks: Vec<Track<T>> = self.tracks.iter().map(|t| predict(t, dt, p.q_pos, p.q_rot)).collect();
        let staged_tick = self.tick.max(tick);

        let points: Vec<_> = ms.iter().map(|m| m.position_world).collect();
        let ids: Vec<_> = tracks.iter().map(|t| (t.id, t.pos_mean)).collect();
        let assignment = associate_points(&points, &ids, T::lit(p.association_threshold));

        let mut summary = IngestSummary::default();
        let r_pos = T::lit(p.r_pos);
        let r_rot = T::lit(p.r_rot);
        for &(mi, tid) in &assignment.pairs {
            let m = &ms[mi];
            let slot = tracks.iter_mut().find(|t| t.id == tid).expect("assigned track exists");
            let mut t = update_position(slot, &m.position_world, r_pos);
            t = update_rotation(&t, &m.rotation, r_rot)?;
            t.hits += 1;
            t.last_tick = tick;
            summary.max_rot_residual = summary.max_rot_residual.max(t.rot_mean.residual().as_f64());
            *slot = t;
            summary.updated.push(tid);
        }
        let mut next_id = self.next_id;
        for &mi in &assignment.spawns {
            let t = Track::spawn(next_id, &ms[mi], p);
            summary.max_rot_residual = summary.max_rot_residual.max(t.rot_mean.residual().as_f64());
            tracks.push(t);
            summary.spawned.push(next_id);
            next_id += 1;
        }
        tracks.retain(|t| {
            let stale = staged_tick.saturating_sub(t.last_tick) >= p.stale_ticks
                && t.hits < p.stale_max_hits
                && !self.claims.contains_key(&t.id);
            if stale {
                summary.pruned.push(t.id);
            }
            !stale
        });
        summary.updated.sort_unstable();
        summary.assignment = assignment;

        self.tracks = tracks;
        self.next_id = next_id;
        self.tick = staged_tick;
        Ok(summary)
    }

    /// Marks a track pollinated. Returns `false` if it is missing or already
    /// pollinated.
    pub fn mark_pollinated(&mut self, id: u32) -> bool {
        match self.tracks.iter_mut().find(|t| t.id == id) {
            Some(t) if !t.pollinated => {
                t.pollinated = true;
                true
            }
            _ => false,
        }
    }

    /// Claims `id` for `arm`. Fails if another arm holds it.
    pub fn claim(&mut self, id: u32, arm: u32) -> bool {
        match self.claims.get(&id) {
            Some(&owner) if owner != arm => false,
            _ => {
                self.claims.retain(|_, a| *a != arm);
                self.claims.insert(id, arm);
                true
            }
        }
    }

    pub fn release(&mut self, arm: u32) {
        self.claims.retain(|_, a| *a != arm);
    }

    pub fn claimed_by_other(&self, id: u32, arm: u32) -> bool {
        matches!(self.claims.get(&id), Some(&a) if a != arm)
    }

    pub fn to_json(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("state serializes")
    }
}

/// One row of the per-tick track log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub tick: u64,
    pub track_id: u32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r00: f64,
    pub r01: f64,
    pub r02: f64,
    pub r10: f64,
    pub r11: f64,
    pub r12: f64,
    pub r20: f64,
    pub r21: f64,
    pub r22: f64,
    pub cov_trace: f64,
    pub rot_cov: f64,
    pub hits: u32,
    pub pollinated: bool,
}

impl TrackRow {
    pub fn from_track<T: Real>(tick: u64, t: &Track<T>) -> Self {
        let r = t.rot_mean.to_row_major().map(|x| x.as_f64());
        TrackRow {
            tick,
            track_id: t.id,
            x: t.pos_mean.x.as_f64(),
            y: t.pos_mean.y.as_f64(),
            z: t.pos_mean.z.as_f64(),
            r00: r[0],
            r01: r[1],
            r02: r[2],
            r10: r[3],
            r11: r[4],
            r12: r[5],
            r20: r[6],
            r21: r[7],
            r22: r[8],
            cov_trace: t.confidence().as_f64(),
            rot_cov: t.rot_cov.as_f64(),
            hits: t.hits,
            pollinated: t.pollinated,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Logged rotation. Not re-validated: values come from an SO(3) filter
    /// state and are stored losslessly.
    pub fn rotation(&self) -> Rotation<f64> {
        Rotation::from_matrix_unchecked(Matrix3::from_row_slice(&self.rotation_row_major()))
    }

    pub fn rotation_row_major(&self) -> [f64; 9] {
        [
            self.r00, self.r01, self.r02, self.r10, self.r11, self.r12, self.r20, self.r21, self.r22,
        ]
    }
}
