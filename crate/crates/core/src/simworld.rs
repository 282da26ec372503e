//! Synthetic ground truth and the stochastic measurement oracle.
//!
//! The oracle stands in for the detector + pose regressor: for every flower
//! inside the camera frustum it emits (with some probability) a single-shot
//! 6-DoF measurement whose pixel, ray depth and orientation are perturbed by
//! the [`NoiseModel`]. The world position is recomputed from the noisy pixel
//! and depth exactly as a real perception stack would do it.

use crate::camera::{project, to_world, uplift, CameraPose, Intrinsics, PixelObs};
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::scalar::{rad, Real};
use crate::so3::Rotation;
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// RNG stream offsets. Camera `i` draws from stream `i`; everything else lives
/// above `1 << 32` so it can never collide with a camera id.
pub mod streams {
    pub const SCENE: u64 = 1 << 32;
    pub const VIEWPOINTS: u64 = 2 << 32;
    pub const COMMANDER: u64 = 3 << 32;
    pub const CALIBRATION: u64 = 4 << 32;
}

/// Independent ChaCha stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowerGT<T: Real> {
    pub id: u32,
    pub pose: Pose<T>,
    pub pollinated: bool,
}

/// Ground-truth flowers, sorted by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Scene<T: Real> {
    pub flowers: Vec<FlowerGT<T>>,
}

#[derive(Serialize, Deserialize)]
struct RawScene {
    flowers: Vec<RawFlower>,
}

#[derive(Serialize, Deserialize)]
struct RawFlower {
    id: u32,
    position: [f64; 3],
    rotation: [f64; 9],
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pollinated: bool,
}

impl<T: Real> Scene<T> {
    pub fn new(mut flowers: Vec<FlowerGT<T>>) -> Result<Self> {
        flowers.sort_by_key(|f| f.id);
        for pair in flowers.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(Error::InvariantViolation {
                    id: pair[0].id,
                    message: "duplicate flower id".into(),
                });
            }
        }
        for f in &flowers {
            if !f.pose.rotation.is_valid() {
                return Err(Error::InvariantViolation {
                    id: f.id,
                    message: "rotation is not in SO(3)".into(),
                });
            }
        }
        Ok(Scene { flowers })
    }

    pub fn len(&self) -> usize {
        self.flowers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flowers.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&FlowerGT<T>> {
        self.flowers
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.flowers[i])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawScene = serde_json::from_str(text).map_err(Error::from_json)?;
        let mut seen = BTreeSet::new();
        let mut flowers = Vec::with_capacity(raw.flowers.len());
        for f in raw.flowers {
            if !seen.insert(f.id) {
                return Err(Error::InvariantViolation {
                    id: f.id,
                    message: "duplicate flower id".into(),
                });
            }
            if f.position.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvariantViolation {
                    id: f.id,
                    message: "non-finite position".into(),
                });
            }
            let rotation = Rotation::from_row_major(f.rotation.map(T::lit)).map_err(|e| Error::InvariantViolation {
                id: f.id,
                message: e.to_string(),
            })?;
            flowers.push(FlowerGT {
                id: f.id,
                pose: Pose::new(Vector3::from(f.position.map(T::lit)), rotation),
                pollinated: f.pollinated,
            });
        }
        Scene::new(flowers)
    }

    pub fn to_json(&self) -> String {
        let raw = RawScene {
            flowers: self
                .flowers
                .iter()
                .map(|f| RawFlower {
                    id: f.id,
                    position: [0, 1, 2].map(|i| f.pose.position[i].as_f64()),
                    rotation: f.pose.rotation.to_row_major().map(|x| x.as_f64()),
                    pollinated: f.pollinated,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("scene serializes")
    }
}

/// Reads and validates a scene file.
pub fn load_scene<T: Real>(path: impl AsRef<Path>) -> Result<Scene<T>> {
    Scene::from_json(&std::fs::read_to_string(path)?)
}

/// Stochastic observation model. Sigmas are in pixels, meters and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub detect_prob: f64,
    pub pixel_sigma: f64,
    pub depth_sigma_near: f64,
    pub depth_sigma_far: f64,
    /// Depth band `[min, max]` (meters) where `depth_sigma_near` applies.
    pub reliable_range: [f64; 2],
    /// Scale of the folded-Gaussian axis-angle perturbation, degrees.
    pub rot_sigma: f64,
    /// Expected false positives per frame.
    pub clutter_rate: f64,
    /// Probability that a detection reports the flower flipped by 180° about
    /// its own x-axis. No measured value exists; off by default.
    #[serde(default)]
    pub bimodal_weight: f64,
}

/// Ratio `depth_sigma_far / depth_sigma_near` used by calibration.
pub const FAR_DEPTH_RATIO: f64 = 3.0;

impl Default for NoiseModel {
    /// Calibrated against the single-shot detector statistics
    /// (3.03 cm, 29.88°, 93.01 % detection, 8.97 px); regenerate with
    /// `flope calibrate-noise`.
    fn default() -> Self {
        NoiseModel {
            detect_prob: 0.9493,
            pixel_sigma: 7.25,
            depth_sigma_near: 0.03685,
            depth_sigma_far: 0.03685 * FAR_DEPTH_RATIO,
            reliable_range: [0.07, 0.50],
            rot_sigma: 48.67,
            clutter_rate: 0.1,
            bimodal_weight: 0.0,
        }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        NoiseModel {
            detect_prob: 1.0,
            pixel_sigma: 0.0,
            depth_sigma_near: 0.0,
            depth_sigma_far: 0.0,
            reliable_range: [0.07, 0.50],
            rot_sigma: 0.0,
            clutter_rate: 0.0,
            bimodal_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(Error::config(format!("noise.{name}"), msg));
        if !(0.0..=1.0).contains(&self.detect_prob) {
            return field("detect_prob", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bimodal_weight) {
            return field("bimodal_weight", "must lie in [0, 1]");
        }
        for (name, v) in [
            ("pixel_sigma", self.pixel_sigma),
            ("depth_sigma_near", self.depth_sigma_near),
            ("depth_sigma_far", self.depth_sigma_far),
            ("rot_sigma", self.rot_sigma),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return field(name, "must be finite and non-negative");
            }
        }
        let [lo, hi] = self.reliable_range;
        if !(lo >= 0.0 && lo < hi) {
            return field("reliable_range", "requires 0 <= min < max");
        }
        Ok(())
    }

    /// Depth sigma for a point at ray depth `d`.
    pub fn depth_sigma(&self, d: f64) -> f64 {
        let [lo, hi] = self.reliable_range;
        if (lo..=hi).contains(&d) {
            self.depth_sigma_near
        } else {
            self.depth_sigma_far
        }
    }
}

/// One single-shot flower observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement<T: Real> {
    pub pixel: PixelObs<T>,
    pub position_world: Vector3<T>,
    pub rotation: Rotation<T>,
    pub camera_id: u32,
    pub tick: u64,
    /// Ground-truth flower that produced it, `None` for clutter. Simulator
    /// bookkeeping only; estimation code never reads it.
    pub truth: Option<u32>,
}

/// One Gaussian primitive of a splatting model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBlob<T: Real> {
    pub mean: Vector3<T>,
    pub covariance: Matrix3<T>,
    /// Amplitude parameter, passed through the logistic sigmoid.
    pub alpha: T,
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `σ(α) · exp(−½ (ξ − x)ᵀ Σ⁻¹ (ξ − x))`.
pub fn evaluate_gaussian<T: Real>(b: &GaussianBlob<T>, xi: &Vector3<T>) -> Result<T> {
    let s = &b.covariance;
    let scale = s.iter().fold(T::zero(), |a, x| a.max(x.abs()));
    if (s - s.transpose())
        .iter()
        .any(|x| x.abs() > T::tol() * scale.max(T::one()))
    {
        return Err(Error::SingularCovariance);
    }
    let chol = s.cholesky().ok_or(Error::SingularCovariance)?;
    let l = chol.l();
    let min_pivot = (0..3).fold(T::max_value().unwrap_or(T::one()), |a, i| a.min(l[(i, i)] * l[(i, i)]));
    if min_pivot <= T::tol() * scale {
        return Err(Error::SingularCovariance);
    }
    let d = xi - b.mean;
    let w = l.solve_lower_triangular(&d).ok_or(Error::SingularCovariance)?;
    Ok(sigmoid(b.alpha) * (-w.norm_squared() / T::lit(2.0)).exp())
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniformly distributed unit vector.
pub fn random_unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(normal(rng), normal(rng), normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Haar-uniform random rotation.
pub fn random_rotation<T: Real>(rng: &mut impl Rng) -> Rotation<T> {
    let q = nalgebra::Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    let r = nalgebra::UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    Rotation::from_matrix_unchecked(r.matrix().map(T::lit))
}

/// Camera placement protocol for viewpoint sampling: distance range (meters)
/// and elevation range (degrees) around the target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewpointProtocol {
    pub radius: [f64; 2],
    pub elevation_deg: [f64; 2],
}

impl Default for ViewpointProtocol {
    fn default() -> Self {
        ViewpointProtocol {
            radius: [0.12, 0.45],
            elevation_deg: [-30.0, 60.0],
        }
    }
}

impl ViewpointProtocol {
    pub fn validate(&self) -> Result<()> {
        let [r_lo, r_hi] = self.radius;
        if !(r_lo > 0.0 && r_lo <= r_hi && r_hi.is_finite()) {
            return Err(Error::config("viewpoints.radius", "requires 0 < min <= max"));
        }
        let [e_lo, e_hi] = self.elevation_deg;
        if !(e_lo <= e_hi && e_lo >= -90.0 && e_hi <= 90.0) {
            return Err(Error::config(
                "viewpoints.elevation_deg",
                "requires -90 <= min <= max <= 90",
            ));
        }
        Ok(())
    }

    pub fn sample<T: Real>(&self, rng: &mut impl Rng, center: &Vector3<T>) -> CameraPose<T> {
        sample_viewpoint(rng, center, self.radius, self.elevation_deg)
    }
}

/// Samples a camera on a spherical shell sector around `center`, looking at it.
///
/// Radius is uniform in `radius_range`, azimuth uniform in `[0, 2π)` and the
/// direction area-uniform within `elevation_range` (degrees). The image x-axis
/// stays horizontal (perpendicular to world z).
pub fn sample_viewpoint<T: Real>(
    rng: &mut impl Rng,
    center: &Vector3<T>,
    radius_range: [f64; 2],
    elevation_range: [f64; 2],
) -> CameraPose<T> {
    let [r_lo, r_hi] = radius_range;
    assert!(0.0 < r_lo && r_lo <= r_hi, "radius range must satisfy 0 < min <= max");
    let [e_lo, e_hi] = elevation_range;
    assert!(e_lo <= e_hi && e_lo >= -90.0 && e_hi <= 90.0, "bad elevation range");
    let r = if r_lo == r_hi {
        r_lo
    } else {
        rng.random_range(r_lo..r_hi)
    };
    let (s_lo, s_hi) = (rad(e_lo).sin(), rad(e_hi).sin());
    let s = if s_lo == s_hi {
        s_lo
    } else {
        rng.random_range(s_lo..s_hi)
    };
    let el = s.asin();
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let offset = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * r;
    let offset = offset.map(T::lit);
    let position = center + offset;
    let rotation = Rotation::look_along(&(-offset), &Vector3::z()).expect("nonzero radius");
    CameraPose::new(Pose::new(position, rotation))
}

/// Raw draws for one detection. Always drawn in full so the stream position
/// does not depend on the noise parameters.
struct DetectionDraws {
    detect: f64,
    pixel: [f64; 2],
    depth: f64,
    rot_angle: f64,
    rot_axis: Vector3<f64>,
    flip: f64,
}

impl DetectionDraws {
    fn sample(rng: &mut impl Rng) -> Self {
        DetectionDraws {
            detect: rng.random(),
            pixel: [normal(rng), normal(rng)],
            depth: normal(rng),
            rot_angle: normal(rng),
            rot_axis: random_unit_vector(rng),
            flip: rng.random(),
        }
    }
}

fn perturb_rotation<T: Real>(r: &Rotation<T>, n: &NoiseModel, d: &DetectionDraws) -> Rotation<T> {
    let angle = (d.rot_angle * rad(n.rot_sigma)).abs();
    let mut out = Rotation::from_axis_angle(&d.rot_axis.map(T::lit), T::lit(angle)) * *r;
    if d.flip < n.bimodal_weight {
        out = out * Rotation::rot_x(T::pi());
    }
    out
}

/// Observes `scene` from one camera.
///
/// Visible flowers are detected with probability `detect_prob`; each detection
/// gets Gaussian pixel noise, range-dependent Gaussian ray-depth noise and an
/// axis-angle orientation perturbation, and its world position is recomputed
/// from the noisy pixel and depth. Poisson clutter is appended at uniform image
/// positions. Occlusion is not modelled.
pub fn observe<T: Real>(
    scene: &[FlowerGT<T>],
    cam: &CameraPose<T>,
    k: &Intrinsics,
    n: &NoiseModel,
    rng: &mut impl Rng,
    camera_id: u32,
    tick: u64,
) -> Vec<Measurement<T>> {
    let mut out = Vec::new();
    for f in scene {
        let Some(truth) = project(&f.pose.position, cam, k) else {
            continue;
        };
        let d = DetectionDraws::sample(rng);
        if !(d.detect < n.detect_prob) {
            continue;
        }
        let true_depth = truth.ray_depth.as_f64();
        let pixel = PixelObs {
            u: truth.u + T::lit(d.pixel[0] * n.pixel_sigma),
            v: truth.v + T::lit(d.pixel[1] * n.pixel_sigma),
            ray_depth: T::lit((true_depth + d.depth * n.depth_sigma(true_depth)).max(1e-3)),
        };
        let rotation = perturb_rotation(&f.pose.rotation, n, &d);
        let position_world = to_world(&uplift(&pixel, k).expect("depth clamped positive"), cam);
        out.push(Measurement {
            pixel,
            position_world,
            rotation,
            camera_id,
            tick,
            truth: Some(f.id),
        });
    }
    if n.clutter_rate > 0.0 {
        let count = Poisson::new(n.clutter_rate).expect("positive rate").sample(rng) as usize;
        let [lo, hi] = n.reliable_range;
        for _ in 0..count {
            let pixel = PixelObs {
                u: T::lit(rng.random_range(0.0..k.width() as f64)),
                v: T::lit(rng.random_range(0.0..k.height() as f64)),
                ray_depth: T::lit(rng.random_range(lo.max(1e-3)..hi)),
            };
            let position_world = to_world(&uplift(&pixel, k).expect("positive depth"), cam);
            out.push(Measurement {
                pixel,
                position_world,
                rotation: random_rotation(rng),
                camera_id,
                tick,
                truth: None,
            });
        }
    }
    out
}

/// Parameters of the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenParams {
    pub count: usize,
    pub center: [f64; 3],
    /// Half extents of the box flowers are drawn from; smaller is tighter.
    pub spread: [f64; 3],
    pub min_separation: f64,
    /// Mean facing direction.
    pub facing: [f64; 3],
    /// Half-angle of the facing cone, degrees.
    pub facing_spread_deg: f64,
}

impl Default for SceneGenParams {
    fn default() -> Self {
        SceneGenParams {
            count: 20,
            center: [0.0, 0.0, 0.0],
            spread: [0.25, 0.08, 0.18],
            min_separation: 0.07,
            facing: [0.0, -1.0, 0.0],
            facing_spread_deg: 45.0,
        }
    }
}

impl SceneGenParams {
    pub fn validate(&self) -> Result<()> {
        if self.spread.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("scene.spread", "must be non-negative"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::config("scene.min_separation", "must be non-negative"));
        }
        if Vector3::from(self.facing).norm() < 1e-9 {
            return Err(Error::config("scene.facing", "must be nonzero"));
        }
        if !(0.0..=180.0).contains(&self.facing_spread_deg) {
            return Err(Error::config("scene.facing_spread_deg", "must lie in [0, 180]"));
        }
        Ok(())
    }
}

/// Random scene: positions uniform in the spread box with rejection for
/// `min_separation`, facing uniform within a cone, random twist.
pub fn gen_scene<T: Real>(rng: &mut impl Rng, p: &SceneGenParams) -> Result<Scene<T>> {
    p.validate()?;
    let center = Vector3::from(p.center);
    let axis = Vector3::from(p.facing).normalize();
    let base = Rotation::<f64>::look_along(&axis, &Vector3::z())?;
    let cos_max = rad(p.facing_spread_deg).cos();
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(p.count);
    let mut flowers = Vec::with_capacity(p.count);
    for id in 0..p.count {
        let mut placed = None;
        for _ in 0..10_000 {
            let c = Vector3::from_fn(|i, _| {
                let s = p.spread[i];
                if s > 0.0 {
                    center[i] + rng.random_range(-s..=s)
                } else {
                    center[i]
                }
            });
            if positions.iter().all(|q| (q - c).norm() >= p.min_separation) {
                placed = Some(c);
                break;
            }
        }
        let pos = placed.ok_or_else(|| {
            Error::SceneGeneration(format!(
                "could not place flower {id} with separation {} m",
                p.min_separation
            ))
        })?;
        positions.push(pos);
        // facing uniform on the spherical cap around `axis`
        let cos_t = rng.random_range(cos_max..=1.0);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let local = Vector3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t);
        let facing = base.apply(&local);
        let twist = rng.random_range(0.0..std::f64::consts::TAU);
        let r = Rotation::look_along(&facing, &Vector3::z())? * Rotation::rot_z(twist);
        flowers.push(FlowerGT {
            id: id as u32,
            pose: Pose::new(pos.map(T::lit), r.cast()),
            pollinated: false,
        });
    }
    Scene::new(flowers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project;

    fn flower(id: u32, p: [f64; 3]) -> FlowerGT<f64> {
        FlowerGT {
            id,
            pose: Pose::new(Vector3::from(p), Rotation::rot_x(0.3)),
            pollinated: false,
        }
    }

    #[test]
    fn viewpoint_on_collapsed_shell_looks_at_center() {
        let mut rng = stream_rng(7, 0);
        let k = Intrinsics::default_test();
        let center = Vector3::<f64>::new(0.1, -0.2, 0.3);
        for _ in 0..100 {
            let c = sample_viewpoint(&mut rng, &center, [0.3, 0.3], [0.0, 0.0]);
            assert!(((c.position() - center).norm() - 0.3).abs() < 1e-12);
            assert!(c.pose.rotation.residual() < 1e-12);
            let px = project(&center, &c, &k).unwrap();
            assert!((px.u - k.cx()).abs() < 1e-6 && (px.v - k.cy()).abs() < 1e-6);
            // image x stays horizontal
            assert!(c.pose.rotation.column(0).z.abs() < 1e-12);
        }
    }

    #[test]
    fn viewpoint_radius_is_uniform() {
        // Kolmogorov-Smirnov against U(0.1, 0.5)
        let mut rng = stream_rng(1, 0);
        let mut r: Vec<f64> = (0..10_000)
            .map(|_| {
                let c = sample_viewpoint(&mut rng, &Vector3::<f64>::zeros(), [0.1, 0.5], [-30.0, 60.0]);
                c.position().norm()
            })
            .collect();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = r.len() as f64;
        let d = r
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let f = (x - 0.1) / 0.4;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        let p = ks_p_value(d, n);
        assert!(p > 0.01, "KS p = {p}");
    }

    fn ks_p_value(d: f64, n: f64) -> f64 {
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut sum = 0.0;
        for j in 1..=100 {
            let j = j as f64;
            sum += 2.0 * (-1f64).powf(j - 1.0) * (-2.0 * j * j * lambda * lambda).exp();
        }
        sum.clamp(0.0, 1.0)
    }

    #[test]
    fn noiseless_observation_is_exact() {
        let scene = vec![flower(0, [0.0, 0.0, 0.0]), flower(1, [0.05, 0.02, -0.03])];
        let k = Intrinsics::default_test();
        let mut rng = stream_rng(3, 0);
        let cam = sample_viewpoint(&mut rng, &Vector3::zeros(), [0.3, 0.3], [10.0, 10.0]);
        let ms = observe(&scene, &cam, &k, &NoiseModel::noiseless(), &mut rng, 0, 5);
        assert_eq!(ms.len(), 2);
        for (m, f) in ms.iter().zip(&scene) {
            let truth = project(&f.pose.position, &cam, &k).unwrap();
            assert_eq!(m.pixel, truth);
            assert_eq!(m.rotation, f.pose.rotation);
            assert_eq!(m.truth, Some(f.id));
            assert_eq!(m.tick, 5);
            let rebuilt = to_world(&uplift(&m.pixel, &k).unwrap(), &cam);
            assert!((rebuilt - f.pose.position).norm() < 1e-9);
        }
    }

    #[test]
    fn flower_behind_camera_never_measured() {
        let scene = vec![flower(0, [0.0, 0.0, -0.2])];
        let cam = CameraPose::new(Pose::<f64>::identity());
        let noise = NoiseModel {
            clutter_rate: 0.0,
            ..NoiseModel::default()
        };
        let mut rng = stream_rng(9, 0);
        for t in 0..1000 {
            assert!(observe(&scene, &cam, &Intrinsics::default_test(), &noise, &mut rng, 0, t).is_empty());
        }
    }

    #[test]
    fn observation_is_deterministic() {
        let scene = vec![flower(0, [0.0, 0.0, 0.3]), flower(1, [0.05, 0.0, 0.35])];
        let cam = CameraPose::new(Pose::<f64>::identity());
        let run = || {
            let mut rng = stream_rng(42, 2);
            (0..50)
                .flat_map(|t| {
                    observe(
                        &scene,
                        &cam,
                        &Intrinsics::default_test(),
                        &NoiseModel::default(),
                        &mut rng,
                        2,
                        t,
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn noisy_measurements_are_valid_rotations() {
        let scene = vec![flower(0, [0.0, 0.0, 0.3])];
        let cam = CameraPose::new(Pose::<f64>::identity());
        let noise = NoiseModel {
            bimodal_weight: 0.5,
            ..NoiseModel::default()
        };
        let mut rng = stream_rng(4, 0);
        for t in 0..500 {
            for m in observe(&scene, &cam, &Intrinsics::default_test(), &noise, &mut rng, 0, t) {
                assert!(m.rotation.residual() < 1e-9);
                assert!(m.position_world.iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn gaussian_examples() {
        let alpha = 0.7f64;
        let s = sigmoid(alpha);
        let unit = GaussianBlob {
            mean: Vector3::new(1.0, 2.0, 3.0),
            covariance: Matrix3::identity(),
            alpha,
        };
        assert_eq!(evaluate_gaussian(&unit, &unit.mean).unwrap(), s);
        let g = evaluate_gaussian(&unit, &Vector3::new(1.0, 2.0, 4.0)).unwrap();
        assert!((g - s * (-0.5f64).exp()).abs() < 1e-15);

        let stretched = GaussianBlob {
            mean: Vector3::zeros(),
            covariance: Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)),
            alpha,
        };
        let g = evaluate_gaussian(&stretched, &Vector3::new(2.0, 0.0, 0.0)).unwrap();
        assert!((g - s * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_rejects_singular_covariance() {
        let mut b = GaussianBlob {
            mean: Vector3::<f64>::zeros(),
            covariance: Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)),
            alpha: 0.0,
        };
        assert!(matches!(
            evaluate_gaussian(&b, &Vector3::zeros()),
            Err(Error::SingularCovariance)
        ));
        b.covariance = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(evaluate_gaussian(&b, &Vector3::zeros()).is_err());
        b.covariance = -Matrix3::identity();
        assert!(evaluate_gaussian(&b, &Vector3::zeros()).is_err());
    }

    #[test]
    fn gaussian_decreases_along_rays() {
        let mut rng = stream_rng(8, 0);
        for _ in 0..200 {
            let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let b = GaussianBlob {
                mean: Vector3::new(0.1, 0.2, 0.3),
                covariance: a * a.transpose() + Matrix3::identity() * 0.05,
                alpha: rng.random_range(-3.0..3.0),
            };
            let dir = random_unit_vector(&mut rng);
            let mut prev = evaluate_gaussian(&b, &b.mean).unwrap();
            for i in 1..50 {
                let g = evaluate_gaussian(&b, &(b.mean + dir * (i as f64 * 0.05))).unwrap();
                assert!(g < prev && g > 0.0);
                prev = g;
            }
        }
    }

    #[test]
    fn scene_json_round_trip_and_errors() {
        let empty = Scene::<f64>::from_json(r#"{"flowers":[]}"#).unwrap();
        assert!(empty.is_empty());

        let dup = r#"{"flowers":[
            {"id":3,"position":[0,0,0],"rotation":[1,0,0,0,1,0,0,0,1]},
            {"id":3,"position":[1,0,0],"rotation":[1,0,0,0,1,0,0,0,1]}]}"#;
        assert!(matches!(
            Scene::<f64>::from_json(dup),
            Err(Error::InvariantViolation { id: 3, .. })
        ));

        let bad_rot = r#"{"flowers":[{"id":7,"position":[0,0,0],"rotation":[2,0,0,0,1,0,0,0,1]}]}"#;
        assert!(matches!(
            Scene::<f64>::from_json(bad_rot),
            Err(Error::InvariantViolation { id: 7, .. })
        ));

        let missing = "{\"flowers\":[\n{\"id\":1,\"rotation\":[1,0,0,0,1,0,0,0,1]}]}";
        match Scene::<f64>::from_json(missing) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("position"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        let mut rng = stream_rng(5, streams::SCENE);
        let scene: Scene<f64> = gen_scene(&mut rng, &SceneGenParams::default()).unwrap();
        let back = Scene::<f64>::from_json(&scene.to_json()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn scene_sorted_by_id() {
        let text = r#"{"flowers":[
            {"id":2,"position":[0,0,0],"rotation":[1,0,0,0,1,0,0,0,1]},
            {"id":0,"position":[1,0,0],"rotation":[1,0,0,0,1,0,0,0,1]}]}"#;
        let s = Scene::<f64>::from_json(text).unwrap();
        assert_eq!(s.flowers.iter().map(|f| f.id).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn generated_scene_respects_separation_and_cone() {
        let p = SceneGenParams::default();
        let mut rng = stream_rng(11, streams::SCENE);
        let s: Scene<f64> = gen_scene(&mut rng, &p).unwrap();
        assert_eq!(s.len(), 20);
        let axis = Vector3::from(p.facing).normalize();
        for (i, a) in s.flowers.iter().enumerate() {
            assert!(a.pose.rotation.residual() < 1e-9);
            assert!(a.pose.rotation.z_axis().dot(&axis) >= rad(p.facing_spread_deg).cos() - 1e-9);
            for b in &s.flowers[i + 1..] {
                assert!((a.pose.position - b.pose.position).norm() >= p.min_separation);
            }
        }
        let crowded = SceneGenParams {
            count: 50,
            spread: [0.01, 0.01, 0.01],
            ..p
        };
        assert!(gen_scene::<f64>(&mut rng, &crowded).is_err());
    }

    #[test]
    fn noise_model_json_mirrors_fields() {
        let n = NoiseModel::default();
        let v: serde_json::Value = serde_json::to_value(n).unwrap();
        for key in [
            "detect_prob",
            "pixel_sigma",
            "depth_sigma_near",
            "depth_sigma_far",
            "reliable_range",
            "rot_sigma",
            "clutter_rate",
            "bimodal_weight",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(NoiseModel { detect_prob: 1.5, ..n }.validate().is_err());
        assert!(NoiseModel {
            reliable_range: [0.5, 0.1],
            ..n
        }
        .validate()
        .is_err());
        assert!(n.validate().is_ok());
    }
}
