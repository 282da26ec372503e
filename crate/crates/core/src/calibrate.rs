//! Fits a [`NoiseModel`] to target single-shot error statistics.
//!
//! A fixed set of (flower, camera) samples is drawn once. Each candidate noise
//! model is scored by running [`observe`] on every sample with the same
//! random stream, so scores change smoothly with the parameters and bisection
//! behaves.

use crate::camera::{project, CameraPose, Intrinsics};
use crate::error::{Error, Result};
use crate::metrics::Thresholds;
use crate::pose::Pose;
use crate::simworld::{
    observe, random_rotation, stream_rng, streams, FlowerGT, NoiseModel, ViewpointProtocol, FAR_DEPTH_RATIO,
};
use crate::so3::zaxis_angle;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Desired single-shot statistics over detected flowers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    /// Mean translational error, centimeters.
    pub trans_cm: f64,
    /// Mean facing-axis error, degrees.
    pub rot_deg: f64,
    /// Fraction of visible flowers detected within the pixel threshold.
    pub det_rate: f64,
    /// Mean pixel error of detections.
    pub det_err_px: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets {
            trans_cm: 3.03,
            rot_deg: 29.88,
            det_rate: 0.9301,
            det_err_px: 8.97,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleShotStats {
    pub trans_cm: f64,
    pub rot_deg: f64,
    pub det_rate: f64,
    pub det_err_px: f64,
    pub visible: usize,
    pub detected: usize,
}

#[derive(Debug, Clone)]
pub struct CalibrationSetup {
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub samples: Vec<(FlowerGT<f64>, CameraPose<f64>)>,
    pub det_px: f64,
}

impl CalibrationSetup {
    /// `n` flowers at the origin with uniform orientations, each seen from
    /// one viewpoint drawn from `protocol`.
    pub fn new(seed: u64, n: usize, k: Intrinsics, protocol: &ViewpointProtocol) -> Self {
        let mut rng = stream_rng(seed, streams::CALIBRATION);
        let samples = (0..n)
            .map(|i| {
                let flower = FlowerGT {
                    id: i as u32,
                    pose: Pose::new(Vector3::zeros(), random_rotation(&mut rng)),
                    pollinated: false,
                };
                let cam = protocol.sample(&mut rng, &Vector3::zeros());
                (flower, cam)
            })
            .collect();
        CalibrationSetup {
            seed,
            intrinsics: k,
            samples,
            det_px: Thresholds::default().det_px,
        }
    }

    /// Single-shot statistics of `noise` (clutter ignored).
    pub fn stats(&self, noise: &NoiseModel) -> SingleShotStats {
        let n = NoiseModel {
            clutter_rate: 0.0,
            ..*noise
        };
        let mut rng = stream_rng(self.seed, streams::CALIBRATION + 1);
        let (mut visible, mut detected, mut ok) = (0usize, 0usize, 0usize);
        let (mut px_sum, mut t_sum, mut r_sum) = (0.0, 0.0, 0.0);
        for (f, cam) in &self.samples {
            let Some(truth) = project(&f.pose.position, cam, &self.intrinsics) else {
                continue;
            };
            visible += 1;
            let ms = observe(std::slice::from_ref(f), cam, &self.intrinsics, &n, &mut rng, 0, 0);
            if let Some(m) = ms.first() {
                detected += 1;
                let px = (m.pixel.u - truth.u).hypot(m.pixel.v - truth.v);
                if px <= self.det_px {
                    ok += 1;
                }
                px_sum += px;
                t_sum += 100.0 * (m.position_world - f.pose.position).norm();
                r_sum += zaxis_angle(&m.rotation, &f.pose.rotation);
            }
        }
        let per = |s: f64| if detected == 0 { 0.0 } else { s / detected as f64 };
        SingleShotStats {
            trans_cm: per(t_sum),
            rot_deg: per(r_sum),
            det_rate: if visible == 0 { 0.0 } else { ok as f64 / visible as f64 },
            det_err_px: per(px_sum),
            visible,
            detected,
        }
    }
}

pub const MAX_ITERATIONS: usize = 100;
/// Accepted relative mismatch of each fitted statistic.
pub const FIT_TOLERANCE: f64 = 0.05;
/// Absolute slack, so zero targets tolerate rounding noise.
const ABS_TOLERANCE: f64 = 1e-9;

/// Finds `x` in `[lo, hi]` with `f(x) ≈ target` for nondecreasing `f`.
fn bisect(parameter: &'static str, target: f64, mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> Result<f64> {
    let fail = |iterations| Error::NoConvergence { parameter, iterations };
    let close = |v: f64| (v - target).abs() <= FIT_TOLERANCE * target + ABS_TOLERANCE;
    let f_lo = f(lo);
    if f_lo >= target {
        return if f_lo == target || close(f_lo) {
            Ok(lo)
        } else {
            Err(fail(0))
        };
    }
    if f(hi) < target && !close(f(hi)) {
        return Err(fail(0));
    }
    let mut best = hi;
    for _ in 0..MAX_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let v = f(mid);
        if (v - target).abs() <= 1e-4 * target + ABS_TOLERANCE {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
        best = mid;
    }
    if close(f(best)) {
        Ok(best)
    } else {
        Err(fail(MAX_ITERATIONS))
    }
}

/// Fits pixel noise to `det_err_px`, detection probability to `det_rate`,
/// near-range depth noise to `trans_cm` (far range is a fixed multiple) and
/// rotation noise to `rot_deg`. Other fields come from `base`.
pub fn calibrate_noise(
    targets: &CalibrationTargets,
    setup: &CalibrationSetup,
    base: &NoiseModel,
) -> Result<NoiseModel> {
    for (name, v) in [
        ("trans_cm", targets.trans_cm),
        ("rot_deg", targets.rot_deg),
        ("det_rate", targets.det_rate),
        ("det_err_px", targets.det_err_px),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(
                format!("targets.{name}"),
                "must be finite and non-negative",
            ));
        }
    }
    if !(targets.det_rate > 0.0 && targets.det_rate <= 1.0) {
        return Err(Error::config("targets.det_rate", "must lie in (0, 1]"));
    }
    let mut n = NoiseModel {
        detect_prob: 1.0,
        pixel_sigma: 0.0,
        depth_sigma_near: 0.0,
        depth_sigma_far: 0.0,
        rot_sigma: 0.0,
        clutter_rate: 0.0,
        ..*base
    };

    n.pixel_sigma = bisect("pixel_sigma", targets.det_err_px, 0.0, 200.0, |s| {
        setup.stats(&NoiseModel { pixel_sigma: s, ..n }).det_err_px
    })?;

    let within = setup.stats(&n).det_rate;
    let p = targets.det_rate / within;
    if p > 1.0 + 1e-12 {
        return Err(Error::NoConvergence {
            parameter: "detect_prob",
            iterations: 0,
        });
    }

    let with_depth = |s: f64| NoiseModel {
        depth_sigma_near: s,
        depth_sigma_far: s * FAR_DEPTH_RATIO,
        ..n
    };
    let d = bisect("depth_sigma_near", targets.trans_cm, 0.0, 1.0, |s| {
        setup.stats(&with_depth(s)).trans_cm
    })?;
    n = with_depth(d);

    n.rot_sigma = bisect("rot_sigma", targets.rot_deg, 0.0, 180.0, |s| {
        setup.stats(&NoiseModel { rot_sigma: s, ..n }).rot_deg
    })?;

    n.detect_prob = p.min(1.0);
    n.clutter_rate = base.clutter_rate;
    Ok(n)
}

/// Per-coordinate R⁹ variance of a rotation measurement under `noise`:
/// `E‖R̃ − R‖²_F / 9 = 4 (1 − E[cos θ]) / 9` with `θ = |N(0, σ)|`.
pub fn rotation_measurement_variance(noise: &NoiseModel) -> f64 {
    let s = noise.rot_sigma.to_radians();
    4.0 * (1.0 - (-s * s / 2.0).exp()) / 9.0
}
