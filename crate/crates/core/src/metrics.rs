//! Evaluation: pose and detection errors, success thresholds, pollination
//! rates, mask overlap and run-level aggregation.

use crate::error::{Error, Result};
use crate::logs::RunLogs;
use crate::pose::Pose;
use crate::scalar::Real;
use crate::so3::zaxis_angle;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Meters.
    pub trans_err: f64,
    /// Degrees between facing axes.
    pub rot_err: f64,
}

/// Success thresholds. Defaults: 20 px, 8 cm, 60°, all inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub det_px: f64,
    pub trans_m: f64,
    pub rot_deg: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            det_px: 20.0,
            trans_m: 0.08,
            rot_deg: 60.0,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("det_px", self.det_px),
            ("trans_m", self.trans_m),
            ("rot_deg", self.rot_deg),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("thresholds.{name}"), "must be positive"));
            }
        }
        Ok(())
    }
}

pub fn pose_error<T: Real>(est: &Pose<T>, gt: &Pose<T>) -> PoseError {
    PoseError {
        trans_err: (est.position - gt.position).norm().as_f64(),
        rot_err: zaxis_angle(&est.rotation, &gt.rotation).as_f64(),
    }
}

pub fn pose_success_with(e: &PoseError, th: &Thresholds) -> bool {
    e.trans_err <= th.trans_m && e.rot_err <= th.rot_deg
}

pub fn pose_success(e: &PoseError) -> bool {
    pose_success_with(e, &Thresholds::default())
}

pub fn detection_success(err_px: f64) -> bool {
    err_px <= Thresholds::default().det_px
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// Row-major bits; length must be `width * height`.
    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Sørensen–Dice overlap `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let both = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / total as f64)
}

/// `(attempted / reachable, succeeded / attempted)`.
pub fn pollination_rates(attempted: usize, succeeded: usize, reachable: usize) -> Result<(f64, f64)> {
    if succeeded > attempted || attempted > reachable || reachable == 0 {
        return Err(Error::InvalidCounts(format!(
            "attempted {attempted}, succeeded {succeeded}, reachable {reachable}"
        )));
    }
    let success = if attempted == 0 {
        0.0
    } else {
        succeeded as f64 / attempted as f64
    };
    Ok((attempted as f64 / reachable as f64, success))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_digest: String,
    pub n_flowers: usize,
    pub n_views: u64,
    /// Flowers with an associated final track.
    pub n_matched: usize,
    pub n_pose_success: usize,
    pub mean_trans_cm: f64,
    pub median_trans_cm: f64,
    pub mean_rot_deg: f64,
    pub median_rot_deg: f64,
    /// Visible ground-truth flower instances over all views.
    pub n_visible: usize,
    pub n_detected: usize,
    pub det_err_px: f64,
    pub det_rate: f64,
    pub pose_rate: f64,
    /// Single-shot means over detected instances.
    pub single_trans_cm: f64,
    pub single_rot_deg: f64,
    pub n_reachable: usize,
    pub n_attempted: usize,
    pub n_succeeded: usize,
    pub attempt_rate: f64,
    pub success_rate: f64,
}

/// The columns of the report CSV. Rates are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub seed: u64,
    pub n_flowers: usize,
    pub n_views: u64,
    pub mean_trans_cm: String,
    pub mean_rot_deg: String,
    pub det_err_px: String,
    pub det_rate: String,
    pub pose_rate: String,
    pub attempt_rate: String,
    pub success_rate: String,
}

impl RunReport {
    pub fn row(&self) -> ReportRow {
        let f = |x: f64| format!("{x:.2}");
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        ReportRow {
            seed: self.seed,
            n_flowers: self.n_flowers,
            n_views: self.n_views,
            mean_trans_cm: f(self.mean_trans_cm),
            mean_rot_deg: f(self.mean_rot_deg),
            det_err_px: f(self.det_err_px),
            det_rate: pct(self.det_rate),
            pose_rate: pct(self.pose_rate),
            attempt_rate: pct(self.attempt_rate),
            success_rate: pct(self.success_rate),
        }
    }

    /// Human-readable summary in two blocks: pose estimation, then
    /// pollination.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "seed {}  flowers {}  views {}",
            self.seed, self.n_flowers, self.n_views
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "estimate", "det px", "det %", "trans cm", "rot deg", "success %"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10}",
            "single-shot",
            self.det_err_px,
            100.0 * self.det_rate,
            self.single_trans_cm,
            self.single_rot_deg,
            "-"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10.2} {:>10.2} {:>10.2}",
            "filtered",
            "-",
            "-",
            self.mean_trans_cm,
            self.mean_rot_deg,
            100.0 * self.pose_rate
        );
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10} {:>10}",
            "", "reachable", "attempt %", "success %"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>10} {:>10.2} {:>10.2}",
            "pollination",
            self.n_reachable,
            100.0 * self.attempt_rate,
            100.0 * self.success_rate
        );
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Median of a sorted slice.
fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
    }
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

/// Minimum fused measurements for a final track to be matched to a flower.
pub const EVAL_MIN_HITS: u32 = 3;

/// One-to-one matching of final tracks to ground-truth flowers.
///
/// Candidates are tracks with at least [`EVAL_MIN_HITS`] hits within the
/// translation threshold of a flower; pairs are committed greedily by most
/// hits, then smallest distance, then lowest ids. Returns
/// `(flower index, row index)` pairs.
pub fn match_tracks(logs: &RunLogs, th: &Thresholds) -> Vec<(usize, usize)> {
    let rows = logs.final_tracks();
    let mut cand = Vec::new();
    for (fi, f) in logs.scene.flowers.iter().enumerate() {
        for &ri in &rows {
            let r = &logs.tracks[ri];
            if r.hits < EVAL_MIN_HITS {
                continue;
            }
            let d = (r.position() - f.pose.position).norm();
            if d <= th.trans_m {
                cand.push((r.hits, d, f.id, r.track_id, fi, ri));
            }
        }
    }
    cand.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    let mut used_f = vec![false; logs.scene.flowers.len()];
    let mut used_t = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (_, _, _, tid, fi, ri) in cand {
        if used_f[fi] || used_t.contains(&tid) {
            continue;
        }
        used_f[fi] = true;
        used_t.insert(tid);
        out.push((fi, ri));
    }
    out.sort_unstable();
    out
}

/// Computes the run report from logs alone. Independent of row order.
pub fn aggregate(logs: &RunLogs) -> Result<RunReport> {
    let th = &logs.context.thresholds;
    let n_flowers = logs.scene.flowers.len();
    if n_flowers == 0 {
        return Err(Error::EmptyRun);
    }

    let mut trans = Vec::new();
    let mut rot = Vec::new();
    let mut n_pose_success = 0;
    let matches = match_tracks(logs, th);
    for &(fi, ri) in &matches {
        let r = &logs.tracks[ri];
        let est = Pose::new(r.position(), r.rotation());
        let e = pose_error(&est, &logs.scene.flowers[fi].pose);
        if pose_success_with(&e, th) {
            n_pose_success += 1;
        }
        trans.push(100.0 * e.trans_err);
        rot.push(e.rot_err);
    }
    let trans = sorted(trans);
    let rot = sorted(rot);

    let n_visible = logs.detections.len();
    let detected: Vec<_> = logs.detections.iter().filter(|d| d.detected).collect();
    let px = sorted(detected.iter().filter_map(|d| d.px_err).collect());
    let single_t = sorted(detected.iter().filter_map(|d| d.trans_err).map(|t| 100.0 * t).collect());
    let single_r = sorted(detected.iter().filter_map(|d| d.rot_err).collect());
    let det_ok = px.iter().filter(|&&e| e <= th.det_px).count();
    let det_rate = if n_visible == 0 {
        0.0
    } else {
        det_ok as f64 / n_visible as f64
    };

    let reachable = logs.reachable_flowers();
    let mut attempted = std::collections::BTreeMap::new();
    for p in &logs.pollinations {
        if let Some(fid) = p.flower_id {
            if reachable.contains(&fid) && p.counted {
                attempted.entry(fid).or_insert(p.success);
            }
        }
    }
    let n_attempted = attempted.len();
    let n_succeeded = attempted.values().filter(|&&s| s).count();
    let (attempt_rate, success_rate) = if reachable.is_empty() {
        (0.0, 0.0)
    } else {
        pollination_rates(n_attempted, n_succeeded, reachable.len())?
    };

    Ok(RunReport {
        seed: logs.context.seed,
        config_digest: logs.context.config_digest.clone(),
        n_flowers,
        n_views: logs.context.n_views,
        n_matched: matches.len(),
        n_pose_success,
        mean_trans_cm: mean(&trans),
        median_trans_cm: median(&trans),
        mean_rot_deg: mean(&rot),
        median_rot_deg: median(&rot),
        n_visible,
        n_detected: detected.len(),
        det_err_px: mean(&px),
        det_rate,
        pose_rate: n_pose_success as f64 / n_flowers as f64,
        single_trans_cm: mean(&single_t),
        single_rot_deg: mean(&single_r),
        n_reachable: reachable.len(),
        n_attempted,
        n_succeeded,
        attempt_rate,
        success_rate,
    })
}

/// Whether `p` lies inside the closed ball `(center, radius)`.
pub fn in_workspace(p: &Vector3<f64>, center: &[f64; 3], radius: f64) -> bool {
    (p - Vector3::from(*center)).norm() <= radius
}
