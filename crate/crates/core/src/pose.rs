use crate::scalar::Real;
use crate::so3::Rotation;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Rigid pose in the world frame: position in meters plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Pose<T: Real> {
    pub position: Vector3<T>,
    pub rotation: Rotation<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(position: Vector3<T>, rotation: Rotation<T>) -> Self {
        Pose { position, rotation }
    }

    pub fn identity() -> Self {
        Pose::new(Vector3::zeros(), Rotation::identity())
    }

    /// Maps a point from this pose's local frame to the parent frame.
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.apply(p) + self.position
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.transpose().apply(&(p - self.position))
    }

    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose::new(self.transform_point(&other.position), self.rotation * other.rotation)
    }

    pub fn inverse(&self) -> Pose<T> {
        let r = self.rotation.transpose();
        Pose::new(-r.apply(&self.position), r)
    }
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}
