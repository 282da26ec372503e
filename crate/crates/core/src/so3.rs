//! Rotation-manifold geometry.
//!
//! Rotations are plain 3x3 direction-cosine matrices. Arbitrary 3x3 (or 9-vector)
//! inputs are mapped back onto SO(3) by orthogonal Procrustes projection, which
//! is also what makes the rotation filter in [`crate::tracker`] work: the filter
//! state lives in R⁹ and is re-projected after every update.
//!
//! Flowers are radially symmetric about their local z-axis, so most error
//! measures here only look at the third column.

use crate::error::{Error, Result};
use crate::scalar::{deg, Real};
use nalgebra::{Matrix3, Vector3};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::ops::Mul;

/// A proper rotation matrix (`mᵀm = I`, `det m = +1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation<T: Real> {
    m: Matrix3<T>,
}

/// Nine unconstrained rotational features, row-major flattening of a 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NineVec<T: Real>(pub [T; 9]);

/// Six rotational features: two stacked 3-vectors (first two matrix columns).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SixVec<T: Real> {
    pub a: Vector3<T>,
    pub b: Vector3<T>,
}

impl<T: Real> NineVec<T> {
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        let mut v = [T::zero(); 9];
        for r in 0..3 {
            for c in 0..3 {
                v[3 * r + c] = m[(r, c)];
            }
        }
        NineVec(v)
    }

    pub fn to_matrix(&self) -> Matrix3<T> {
        Matrix3::from_row_slice(&self.0)
    }

    pub fn scale(&self, s: T) -> Self {
        NineVec(self.0.map(|x| x * s))
    }
}

impl<T: Real> SixVec<T> {
    pub fn new(a: Vector3<T>, b: Vector3<T>) -> Self {
        SixVec { a, b }
    }
}

impl<T: Real> Default for Rotation<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Rotation { m: Matrix3::identity() }
    }

    /// Wraps `m` after checking the rotation invariants at `T::TOL`.
    pub fn from_matrix(m: Matrix3<T>) -> Result<Self> {
        let r = Rotation { m };
        let residual = r.residual();
        if residual > T::tol() || !residual.is_finite() {
            return Err(Error::InvalidRotation(format!(
                "orthonormality residual {residual} exceeds {}",
                T::TOL
            )));
        }
        Ok(r)
    }

    /// Wraps `m` without validation. The caller guarantees it is a rotation.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Rotation { m }
    }

    /// Builds a rotation from a row-major array, validating invariants.
    pub fn from_row_major(v: [T; 9]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_row_slice(&v))
    }

    /// Rodrigues' formula. `axis` need not be normalized but must be nonzero.
    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let n = axis.norm();
        if n <= T::zero() {
            return Self::identity();
        }
        let k = axis / n;
        let kx = k.cross_matrix();
        let m = Matrix3::identity() + kx * angle.sin() + kx * kx * (T::one() - angle.cos());
        Rotation { m }
    }

    pub fn rot_x(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn rot_y(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rot_z(angle: T) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    /// Minimal rotation taking unit vector `from` onto unit vector `to`.
    ///
    /// Fails with [`Error::Antipodal`] when the vectors are opposite, where the
    /// rotation axis is undefined.
    pub fn shortest_arc(from: &Vector3<T>, to: &Vector3<T>) -> Result<Self> {
        let c = from.dot(to);
        if c < -T::one() + T::tol() {
            return Err(Error::Antipodal);
        }
        let vx = from.cross(to).cross_matrix();
        let m = Matrix3::identity() + vx + vx * vx / (T::one() + c);
        Ok(Rotation { m })
    }

    /// Rotation whose third column is `dir`, with the first column kept
    /// perpendicular to `up` where possible (camera-style look-along).
    pub fn look_along(dir: &Vector3<T>, up: &Vector3<T>) -> Result<Self> {
        let n = dir.norm();
        if n <= T::tol() {
            return Err(Error::DegenerateInput("look direction is zero".into()));
        }
        let z = dir / n;
        let mut x = z.cross(up);
        if x.norm() <= T::lit(1e-6) {
            // looking along `up`: fall back to any axis not parallel to z
            let alt = if z.x.abs() < T::lit(0.9) {
                Vector3::x()
            } else {
                Vector3::y()
            };
            x = z.cross(&alt);
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Ok(Rotation {
            m: Matrix3::from_columns(&[x, y, z]),
        })
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.m
    }

    pub fn column(&self, i: usize) -> Vector3<T> {
        self.m.column(i).into_owned()
    }

    /// The flower's facing direction (third column).
    pub fn z_axis(&self) -> Vector3<T> {
        self.column(2)
    }

    pub fn transpose(&self) -> Self {
        Rotation { m: self.m.transpose() }
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: &Vector3<T>) -> Vector3<T> {
        self.m * v
    }

    /// Geodesic angle of this rotation in radians, in `[0, π]`.
    pub fn angle(&self) -> T {
        let c = (self.m.trace() - T::one()) / T::lit(2.0);
        c.clamp(-T::one(), T::one()).acos()
    }

    pub fn flatten(&self) -> NineVec<T> {
        NineVec::from_matrix(&self.m)
    }

    pub fn to_row_major(&self) -> [T; 9] {
        self.flatten().0
    }

    /// Largest deviation from the rotation invariants: max over the entries
    /// of `|mᵀm − I|` and `|det m − 1|`.
    pub fn residual(&self) -> T {
        let e = self.m.transpose() * self.m - Matrix3::identity();
        let ortho = e.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
        ortho.max((self.m.determinant() - T::one()).abs())
    }

    pub fn is_valid(&self) -> bool {
        self.residual() <= T::tol()
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation {
            m: self.m.map(|x| U::lit(x.as_f64())),
        }
    }
}

impl<T: Real> Mul for Rotation<T> {
    type Output = Rotation<T>;

    fn mul(self, rhs: Self) -> Self {
        Rotation { m: self.m * rhs.m }
    }
}

impl<T: Real> Mul<&Rotation<T>> for &Rotation<T> {
    type Output = Rotation<T>;

    fn mul(self, rhs: &Rotation<T>) -> Rotation<T> {
        Rotation { m: self.m * rhs.m }
    }
}

impl<T: Real + Serialize> Serialize for Rotation<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().serialize(s)
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for Rotation<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[T; 9]>::deserialize(d)?;
        Rotation::from_row_major(v).map_err(D::Error::custom)
    }
}

/// Nearest rotation (Frobenius) to an arbitrary 3x3 matrix.
///
/// With `M = U Σ Vᵀ` the result is `U diag(1, 1, det(UVᵀ)) Vᵀ`, the sign flip
/// applied to the direction of the smallest singular value. This maximizes
/// `trace(Rᵀ M)` over SO(3).
pub fn project_matrix<T: Real>(m: &Matrix3<T>) -> Result<Rotation<T>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateInput("non-finite matrix entry".into()));
    }
    let svd = m.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::DegenerateInput("SVD did not converge".into()));
    };
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap_or(std::cmp::Ordering::Equal));
    if s[order[1]] <= T::tol() {
        return Err(Error::DegenerateInput(format!(
            "rank < 2 (singular values {}, {}, {})",
            s[0], s[1], s[2]
        )));
    }
    if (u * v_t).determinant() < T::zero() {
        let mut col = u.column_mut(order[0]);
        col.neg_mut();
    }
    Ok(Rotation { m: u * v_t })
}

/// Projects a 9-vector (row-major 3x3) onto SO(3).
pub fn svd_project<T: Real>(x: &NineVec<T>) -> Result<Rotation<T>> {
    project_matrix(&x.to_matrix())
}

/// Gram-Schmidt orthonormalization of the 6D representation.
///
/// The first column is `a` normalized, the second is the part of `b`
/// orthogonal to it, the third their cross product.
pub fn gram_schmidt_project<T: Real>(x: &SixVec<T>) -> Result<Rotation<T>> {
    let na = x.a.norm();
    let nb = x.b.norm();
    if na <= T::tol() || nb <= T::tol() {
        return Err(Error::DegenerateInput("zero vector in 6D input".into()));
    }
    if x.a.cross(&x.b).norm() / (na * nb) <= T::tol() {
        return Err(Error::DegenerateInput("parallel vectors in 6D input".into()));
    }
    let c1 = x.a / na;
    let c2 = (x.b - c1 * x.b.dot(&c1)).normalize();
    let c3 = c1.cross(&c2);
    Ok(Rotation {
        m: Matrix3::from_columns(&[c1, c2, c3]),
    })
}

/// Angle in degrees between the z-axes (facing directions) of two rotations.
///
/// Evaluated as `atan2(|a₃×b₃|, a₃·b₃)`, which equals `acos(clamp(a₃·b₃))`
/// but keeps full precision near 0° and 180°.
pub fn zaxis_angle<T: Real>(a: &Rotation<T>, b: &Rotation<T>) -> T {
    let za = a.z_axis();
    let zb = b.z_axis();
    deg(za.cross(&zb).norm().atan2(za.dot(&zb)))
}

/// Removes the rotation about the flower's own axis.
///
/// Returns the shortest-arc rotation taking `e₃` onto `r·e₃`, so the result has
/// the same facing direction as `r` and no residual twist about it.
pub fn nullify_yaw<T: Real>(r: &Rotation<T>) -> Result<Rotation<T>> {
    Rotation::shortest_arc(&Vector3::z(), &r.z_axis())
}

/// Frobenius distance `‖a − b‖_F`.
pub fn chordal_distance<T: Real>(a: &Rotation<T>, b: &Rotation<T>) -> T {
    (a.m - b.m).norm()
}

/// Weighted chordal L2 mean: the projection of `Σ wᵢ Rᵢ`.
pub fn chordal_mean<T: Real>(rs: &[Rotation<T>], ws: &[T]) -> Result<Rotation<T>> {
    if rs.len() != ws.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rotations but {} weights",
            rs.len(),
            ws.len()
        )));
    }
    if ws.iter().any(|w| *w < T::zero() || !w.is_finite()) {
        return Err(Error::DegenerateInput("negative or non-finite weight".into()));
    }
    if !ws.iter().any(|w| *w > T::zero()) {
        return Err(Error::DegenerateInput("no strictly positive weight".into()));
    }
    let sum = rs.iter().zip(ws).fold(Matrix3::zeros(), |acc, (r, w)| acc + r.m * *w);
    project_matrix(&sum)
}
