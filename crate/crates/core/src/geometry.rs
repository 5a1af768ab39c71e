//! Rigid transforms, unit quaternions and the pinhole camera.
//!
//! Quaternions are kept in canonical form with a non-negative scalar part so
//! that two poses describing the same rotation compare equal component-wise.

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, Vector4};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum GeometryError {
    #[error("point is behind the camera")]
    BehindCamera,
    #[error("depth must be positive and finite")]
    InvalidDepth,
    #[error("quaternion mean needs at least one input")]
    EmptyInput,
    #[error("weights must be positive and finite")]
    InvalidWeight,
}

/// Flips the sign of `q` if needed so that its scalar part is non-negative.
pub fn canonical<T: Real>(q: UnitQuaternion<T>) -> UnitQuaternion<T> {
    if q.w < T::zero() {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rigid transform: `x ↦ q·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Real> {
    pub t: Vector3<T>,
    pub q: UnitQuaternion<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(t: Vector3<T>, q: UnitQuaternion<T>) -> Self {
        Self { t, q: canonical(q) }
    }

    pub fn identity() -> Self {
        Self {
            t: Vector3::zeros(),
            q: UnitQuaternion::identity(),
        }
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(t: Vector3<T>, w: T, x: T, y: T, z: T) -> Self {
        Self::new(t, UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(t, UnitQuaternion::identity())
    }

    pub fn from_rotation(q: UnitQuaternion<T>) -> Self {
        Self::new(Vector3::zeros(), q)
    }

    /// Pure yaw rotation (about world `z`) followed by a translation.
    pub fn from_yaw(t: Vector3<T>, yaw_rad: T) -> Self {
        Self::new(t, UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_rad))
    }

    /// Translation along `x` only.
    pub fn tx(x: T) -> Self {
        Self::from_translation(Vector3::new(x, T::zero(), T::zero()))
    }

    /// Rotation about `z` by `deg` degrees.
    pub fn rz_deg(deg: T) -> Self {
        Self::from_yaw(Vector3::zeros(), deg.to_rad())
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        self.q.to_rotation_matrix().into_inner()
    }

    /// Yaw angle of the rotated `x` axis projected onto the `xy` plane.
    pub fn yaw(&self) -> T {
        let r = self.rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(self.q * other.t + self.t, self.q * other.q)
    }

    pub fn inverse(&self) -> Self {
        let qi = self.q.inverse();
        Self::new(-(qi * self.t), qi)
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<T>) -> Vector3<T> {
        self.q * x + self.t
    }

    /// `(w, x, y, z)` components of the rotation.
    pub fn wxyz(&self) -> [T; 4] {
        [self.q.w, self.q.i, self.q.j, self.q.k]
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        let c = |v: T| U::lit(v.as_f64());
        Pose::from_wxyz(
            Vector3::new(c(self.t.x), c(self.t.y), c(self.t.z)),
            c(self.q.w),
            c(self.q.i),
            c(self.q.j),
            c(self.q.k),
        )
    }
}

/// Image coordinates in pixels. Integer values address pixel centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pixel<T: Real> {
    pub u: T,
    pub v: T,
}

impl<T: Real> Pixel<T> {
    pub fn new(u: T, v: T) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, other: &Self) -> T {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Undistorted pinhole camera with its pose in the world frame.
///
/// Camera axes follow the usual vision convention: `z` forward, `x` right,
/// `y` down. `extrinsic` maps camera coordinates into world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
    pub extrinsic: Pose<T>,
}

impl<T: Real> CameraModel<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: u32, height: u32) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic: Pose::identity(),
        }
    }

    pub fn with_extrinsic(mut self, extrinsic: Pose<T>) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    /// Checks focal lengths and principal point against the image size.
    pub fn is_valid(&self) -> bool {
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        self.fx > T::zero()
            && self.fy > T::zero()
            && self.cx > T::zero()
            && self.cx < w
            && self.cy > T::zero()
            && self.cy < h
    }

    /// Camera pose looking from `eye` towards `target`, with world `z` up.
    pub fn look_at(eye: Vector3<T>, target: Vector3<T>) -> Pose<T> {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&Vector3::z());
        if right.norm() < T::lit(1e-9) {
            right = Vector3::x();
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_columns(&[right, down, forward]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Pose::new(eye, q)
    }

    pub fn center(&self) -> Vector3<T> {
        self.extrinsic.t
    }

    pub fn world_to_camera(&self, x_world: &Vector3<T>) -> Vector3<T> {
        self.extrinsic.inverse().apply(x_world)
    }

    pub fn project(&self, x_cam: &Vector3<T>) -> Result<Pixel<T>, GeometryError> {
        if !(x_cam.z > T::zero()) {
            return Err(GeometryError::BehindCamera);
        }
        Ok(Pixel::new(
            self.fx * x_cam.x / x_cam.z + self.cx,
            self.fy * x_cam.y / x_cam.z + self.cy,
        ))
    }

    pub fn backproject(&self, px: Pixel<T>, depth: T) -> Result<Vector3<T>, GeometryError> {
        if !(depth > T::zero()) || !depth.is_finite() {
            return Err(GeometryError::InvalidDepth);
        }
        Ok(Vector3::new(
            (px.u - self.cx) * depth / self.fx,
            (px.v - self.cy) * depth / self.fy,
            depth,
        ))
    }

    pub fn contains(&self, px: &Pixel<T>) -> bool {
        let half = T::lit(0.5);
        px.u >= -half
            && px.v >= -half
            && px.u < T::lit(self.width as f64) - half
            && px.v < T::lit(self.height as f64) - half
    }

    pub fn cast<U: Real>(&self) -> CameraModel<U> {
        let c = |v: T| U::lit(v.as_f64());
        CameraModel {
            fx: c(self.fx),
            fy: c(self.fy),
            cx: c(self.cx),
            cy: c(self.cy),
            width: self.width,
            height: self.height,
            extrinsic: self.extrinsic.cast(),
        }
    }
}

/// Angle between two orientations in degrees, in `[0, 180]`.
///
/// Invariant under the quaternion double cover.
pub fn geodesic_deg<T: Real>(q1: &UnitQuaternion<T>, q2: &UnitQuaternion<T>) -> T {
    let d = q1.inverse() * q2;
    let angle = T::lit(2.0) * d.imag().norm().atan2(d.w.abs());
    angle.to_deg()
}

fn coords<T: Real>(q: &UnitQuaternion<T>) -> Vector4<T> {
    q.as_ref().coords
}

/// Shortest-arc spherical linear interpolation.
pub fn slerp<T: Real>(q1: &UnitQuaternion<T>, q2: &UnitQuaternion<T>, t: T) -> UnitQuaternion<T> {
    let a = coords(q1);
    let mut b = coords(q2);
    if a.dot(&b) < T::zero() {
        b = -b;
    }
    // angle between the 4-vectors, robust near zero
    let theta = T::lit(2.0) * (a - b).norm().atan2((a + b).norm());
    let s = theta.sin();
    let mixed = if s < T::lit(1e-12) {
        a * (T::one() - t) + b * t
    } else {
        a * (((T::one() - t) * theta).sin() / s) + b * ((t * theta).sin() / s)
    };
    canonical(Unit::new_normalize(Quaternion::from(mixed)))
}

/// Weighted orientation average by an incremental slerp chain.
///
/// Inputs are folded in the given order: `acc ← slerp(acc, q_i, w_i / W_i)`
/// where `W_i` is the cumulative weight. Callers pass items sorted by
/// sensor id so the result is independent of arrival order.
pub fn weighted_quat_mean<T: Real>(
    items: &[(UnitQuaternion<T>, T)],
) -> Result<UnitQuaternion<T>, GeometryError> {
    let (first, rest) = items.split_first().ok_or(GeometryError::EmptyInput)?;
    if items.iter().any(|(_, w)| !(*w > T::zero()) || !w.is_finite()) {
        return Err(GeometryError::InvalidWeight);
    }
    let mut acc = canonical(first.0);
    let mut cumulative = first.1;
    for (q, w) in rest {
        cumulative += *w;
        acc = slerp(&acc, q, *w / cumulative);
    }
    Ok(acc)
}
