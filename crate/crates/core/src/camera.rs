//! Pinhole camera model.
//!
//! Camera frame follows the usual vision convention: x right, y down, z along
//! the optical axis. Depth is always measured along the viewing ray, not along
//! the optical axis.

use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::scalar::Real;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics", into = "RawIntrinsics")]
pub struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct RawIntrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<RawIntrinsics> for Intrinsics {
    type Error = Error;

    fn try_from(r: RawIntrinsics) -> Result<Self> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Intrinsics> for RawIntrinsics {
    fn from(k: Intrinsics) -> Self {
        RawIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidIntrinsics(m.to_string()));
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return bad("focal lengths must be positive");
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return bad("principal point must lie inside the image");
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// 1280x720 test camera with a 90° horizontal field of view.
    pub fn default_test() -> Self {
        Intrinsics {
            fx: 640.0,
            fy: 640.0,
            cx: 640.0,
            cy: 360.0,
            width: 1280,
            height: 720,
        }
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn matrix<T: Real>(&self) -> Matrix3<T> {
        Matrix3::new(
            T::lit(self.fx),
            T::zero(),
            T::lit(self.cx),
            T::zero(),
            T::lit(self.fy),
            T::lit(self.cy),
            T::zero(),
            T::zero(),
            T::one(),
        )
    }

    /// Inclusive-exclusive image bounds test.
    pub fn contains<T: Real>(&self, u: T, v: T) -> bool {
        u >= T::zero() && u < T::lit(self.width as f64) && v >= T::zero() && v < T::lit(self.height as f64)
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::default_test()
    }
}

/// Pose of a camera in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct CameraPose<T: Real> {
    pub pose: Pose<T>,
}

impl<T: Real> CameraPose<T> {
    pub fn new(pose: Pose<T>) -> Self {
        CameraPose { pose }
    }

    pub fn position(&self) -> Vector3<T> {
        self.pose.position
    }

    pub fn optical_axis(&self) -> Vector3<T> {
        self.pose.rotation.z_axis()
    }
}

/// A pixel with depth measured along its viewing ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelObs<T> {
    pub u: T,
    pub v: T,
    pub ray_depth: T,
}

/// Lifts a pixel with ray depth into the camera frame:
/// `x = D · K⁻¹ũ / ‖K⁻¹ũ‖`.
pub fn uplift<T: Real>(obs: &PixelObs<T>, k: &Intrinsics) -> Result<Vector3<T>> {
    if !(obs.ray_depth > T::zero()) {
        return Err(Error::NonPositiveDepth(obs.ray_depth.as_f64()));
    }
    let ray = Vector3::new(
        (obs.u - T::lit(k.cx)) / T::lit(k.fx),
        (obs.v - T::lit(k.cy)) / T::lit(k.fy),
        T::one(),
    );
    Ok(ray * (obs.ray_depth / ray.norm()))
}

pub fn to_world<T: Real>(x_cam: &Vector3<T>, c: &CameraPose<T>) -> Vector3<T> {
    c.pose.transform_point(x_cam)
}

pub fn to_camera<T: Real>(x_world: &Vector3<T>, c: &CameraPose<T>) -> Vector3<T> {
    c.pose.inverse_transform_point(x_world)
}

/// Projects a world point; `None` when it is behind the camera or outside the
/// image.
pub fn project<T: Real>(x_world: &Vector3<T>, c: &CameraPose<T>, k: &Intrinsics) -> Option<PixelObs<T>> {
    let x = to_camera(x_world, c);
    if x.z <= T::zero() {
        return None;
    }
    let u = T::lit(k.fx) * x.x / x.z + T::lit(k.cx);
    let v = T::lit(k.fy) * x.y / x.z + T::lit(k.cy);
    if !k.contains(u, v) {
        return None;
    }
    Some(PixelObs {
        u,
        v,
        ray_depth: x.norm(),
    })
}
