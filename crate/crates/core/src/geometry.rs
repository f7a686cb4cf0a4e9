//! Coordinate frames, quaternions, the pinhole camera and small shared utilities.
//!
//! Conventions used everywhere in the crate:
//!
//! * world frame is right-handed with +z up;
//! * camera frame looks down +z with +y pointing down the image and the
//!   pixel origin at the top-left corner;
//! * extrinsics map world points into the camera frame as
//!   `x_cam = R(q) * x_world + t`;
//! * the principal point sits exactly at the image center.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2 = Matrix2<f64>;

/// Points closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Isotropic low-pass added to every projected covariance, in px².
pub const COV2D_LOW_PASS: f64 = 0.3;

/// Rotation quaternion stored as `(w, x, y, z)`.
///
/// Values are not forced to unit length; every consumer normalizes first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Unit-length copy. A zero quaternion maps to the identity.
    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Self::IDENTITY;
        }
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, r: Self) -> Self {
        let a = self;
        Self::new(
            a.w * r.w - a.x * r.x - a.y * r.y - a.z * r.z,
            a.w * r.x + a.x * r.w + a.y * r.z - a.z * r.y,
            a.w * r.y - a.x * r.z + a.y * r.w + a.z * r.x,
            a.w * r.z + a.x * r.y - a.y * r.x + a.z * r.w,
        )
    }

    /// Angle of the relative rotation, `2 acos(|q1 . q2|)`, in radians.
    pub fn geodesic_angle(self, other: Self) -> f64 {
        let d = self.normalized().dot(other.normalized()).abs().min(1.0);
        2.0 * d.acos()
    }

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotmat(m: &Mat3) -> Self {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Self::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Self::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.normalized()
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Rotation matrix of `q`; the input is normalized first, so `q` and `-q` agree.
pub fn quat_to_rotmat(q: Quaternion) -> Mat3 {
    unit_quat_to_rotmat(q.normalized())
}

fn unit_quat_to_rotmat(q: Quaternion) -> Mat3 {
    let Quaternion { w, x, y, z } = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient on `R = quat_to_rotmat(q)` back to the ambient
/// 4-vector `q`, including the normalization step. The result is orthogonal
/// to `q`.
pub fn rotmat_vjp(q: Quaternion, d_r: &Mat3) -> [f64; 4] {
    let n = q.norm();
    let u = q.normalized();
    let Quaternion { w, x, y, z } = u;
    let g = |m: [[f64; 3]; 3]| -> f64 {
        let mut acc = 0.0;
        for (i, row) in m.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                acc += v * d_r[(i, j)];
            }
        }
        acc
    };
    let dw = g([
        [0.0, -2.0 * z, 2.0 * y],
        [2.0 * z, 0.0, -2.0 * x],
        [-2.0 * y, 2.0 * x, 0.0],
    ]);
    let dx = g([
        [0.0, 2.0 * y, 2.0 * z],
        [2.0 * y, -4.0 * x, -2.0 * w],
        [2.0 * z, 2.0 * w, -4.0 * x],
    ]);
    let dy = g([
        [-4.0 * y, 2.0 * x, 2.0 * w],
        [2.0 * x, 0.0, 2.0 * z],
        [-2.0 * w, 2.0 * z, -4.0 * y],
    ]);
    let dz = g([
        [-4.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * w, -4.0 * z, 2.0 * y],
        [2.0 * x, 2.0 * y, 0.0],
    ]);
    let gu = [dw, dx, dy, dz];
    if n == 0.0 || !n.is_finite() {
        return [0.0; 4];
    }
    let ua = u.to_array();
    let radial: f64 = gu.iter().zip(ua.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - ua[k] * radial) / n;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    /// World-to-camera rotation.
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl CameraExtrinsics {
    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_rotmat(self.rotation)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    pub fn from_rotation_center(rotation: Quaternion, center: Vec3) -> Self {
        let r = quat_to_rotmat(rotation);
        Self {
            rotation: rotation.normalized(),
            translation: -(r * center),
        }
    }

    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    /// Horizontal field of view, radians.
    pub fov_x: f64,
    /// Vertical field of view, radians.
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn square(fov: f64, size: u32) -> Self {
        Self {
            fov_x: fov,
            fov_y: fov,
            width: size,
            height: size,
        }
    }

    /// Focal lengths in pixels.
    pub fn focal(&self) -> (f64, f64) {
        (
            focal_from_fov(self.fov_x, self.width),
            focal_from_fov(self.fov_y, self.height),
        )
    }

    pub fn principal_point(&self) -> Vec2 {
        Vec2::new(self.width as f64 * 0.5, self.height as f64 * 0.5)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        if !ok(self.fov_x) || !ok(self.fov_y) {
            return Err(Error::invalid(format!(
                "field of view must lie in (0, pi), got ({}, {})",
                self.fov_x, self.fov_y
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size must be at least 1x1"));
        }
        Ok(())
    }
}

pub fn focal_from_fov(fov: f64, size: u32) -> f64 {
    (size as f64 * 0.5) / (fov * 0.5).tan()
}

/// d focal / d fov.
pub fn focal_fov_derivative(fov: f64, size: u32) -> f64 {
    let s = (fov * 0.5).sin();
    -(size as f64 * 0.25) / (s * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub extrinsics: CameraExtrinsics,
    pub intrinsics: CameraIntrinsics,
}

impl Camera {
    pub fn new(extrinsics: CameraExtrinsics, intrinsics: CameraIntrinsics) -> Self {
        Self {
            extrinsics,
            intrinsics,
        }
    }

    /// Camera at `center` looking along `forward`, with roll fixed so that
    /// world +z appears up in the image. Views parallel to +z fall back to
    /// +x as the up hint.
    pub fn looking_along(center: Vec3, forward: Vec3, intrinsics: CameraIntrinsics) -> Self {
        let fwd = forward.normalize();
        let mut up = Vec3::z();
        if fwd.cross(&up).norm() < 1e-9 {
            up = Vec3::x();
        }
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        let rotation = Quaternion::from_rotmat(&r);
        Self::new(
            CameraExtrinsics {
                rotation,
                translation: -(quat_to_rotmat(rotation) * center),
            },
            intrinsics,
        )
    }

    pub fn look_at(center: Vec3, target: Vec3, intrinsics: CameraIntrinsics) -> Self {
        Self::looking_along(center, target - center, intrinsics)
    }

    pub fn center(&self) -> Vec3 {
        self.extrinsics.center()
    }

    /// Pinhole projection of a world point. `None` when behind the near plane.
    pub fn project_point(&self, p: &Vec3) -> Option<Vec2> {
        let xc = self.extrinsics.world_to_camera(p);
        if xc.z <= NEAR_PLANE {
            return None;
        }
        let (fx, fy) = self.intrinsics.focal();
        let pp = self.intrinsics.principal_point();
        Some(Vec2::new(fx * xc.x / xc.z + pp.x, fy * xc.y / xc.z + pp.y))
    }
}

/// Spherical coordinates: `theta` is the azimuth around +z, `phi` the polar
/// angle measured from +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spherical {
    pub r: f64,
    pub theta: f64,
    pub phi: f64,
}

impl Spherical {
    pub fn new(r: f64, theta: f64, phi: f64) -> Self {
        Self { r, theta, phi }
    }

    /// Columns are d/dr, d/dtheta, d/dphi of the Cartesian point.
    pub fn jacobian(&self) -> Mat3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        let r = self.r;
        Mat3::new(
            sp * ct,
            -r * sp * st,
            r * cp * ct,
            sp * st,
            r * sp * ct,
            r * cp * st,
            cp,
            0.0,
            -r * sp,
        )
    }
}

pub fn spherical_to_cartesian(s: Spherical) -> Vec3 {
    let (st, ct) = s.theta.sin_cos();
    let (sp, cp) = s.phi.sin_cos();
    Vec3::new(s.r * sp * ct, s.r * sp * st, s.r * cp)
}

/// Inverse of [`spherical_to_cartesian`]; the origin maps to `(0, 0, 0)`.
pub fn cartesian_to_spherical(v: Vec3) -> Spherical {
    let r = v.norm();
    if r == 0.0 {
        return Spherical::new(0.0, 0.0, 0.0);
    }
    let phi = (v.z / r).clamp(-1.0, 1.0).acos();
    let theta = v.y.atan2(v.x);
    Spherical::new(r, theta, phi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3 {
    pub extent: Vec3,
}

pub fn compute_bbox(positions: &[Vec3]) -> Result<BBox3> {
    let first = positions
        .first()
        .ok_or_else(|| Error::EmptyInput("bounding box of an empty point list".into()))?;
    let (mut lo, mut hi) = (*first, *first);
    for p in &positions[1..] {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    Ok(BBox3 { extent: hi - lo })
}

/// A Gaussian's footprint in image space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    /// Pixel coordinates of the projected mean.
    pub mean: Vec2,
    /// Image-space covariance including the low-pass term, px².
    pub cov: Mat2,
    /// Camera-space depth.
    pub depth: f64,
}

/// Intermediates of the EWA projection kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionState {
    pub cam_point: Vec3,
    pub world_to_cam: Mat3,
    pub jacobian: Matrix2x3<f64>,
    pub focal: (f64, f64),
    pub projected: Projected,
}

/// Projects a world-space Gaussian. `None` is the culled marker for
/// means at or behind the near plane.
pub fn project_gaussian(mean: &Vec3, cov3d: &Mat3, cam: &Camera) -> Option<Projected> {
    project_gaussian_full(mean, cov3d, cam).map(|s| s.projected)
}

pub fn project_gaussian_full(mean: &Vec3, cov3d: &Mat3, cam: &Camera) -> Option<ProjectionState> {
    let w = cam.extrinsics.rotation_matrix();
    let xc = w * mean + cam.extrinsics.translation;
    if xc.z <= NEAR_PLANE {
        return None;
    }
    let (fx, fy) = cam.intrinsics.focal();
    let pp = cam.intrinsics.principal_point();
    let z = xc.z;
    let mean2 = Vec2::new(fx * xc.x / z + pp.x, fy * xc.y / z + pp.y);
    let j = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * xc.x / (z * z),
        0.0,
        fy / z,
        -fy * xc.y / (z * z),
    );
    let t = j * w;
    let mut cov = t * cov3d * t.transpose();
    // enforce exact symmetry
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += COV2D_LOW_PASS;
    cov[(1, 1)] += COV2D_LOW_PASS;
    Some(ProjectionState {
        cam_point: xc,
        world_to_cam: w,
        jacobian: j,
        focal: (fx, fy),
        projected: Projected {
            mean: mean2,
            cov,
            depth: z,
        },
    })
}

/// Sinusoidal token encoding `[sin(x f_i), cos(x f_i)]` for `i = 1..=C/2`
/// with `f_i = 10000^(-i / (C/2))`, interleaved per frequency.
pub fn positional_encoding(x: f64, channels: usize) -> Result<Vec<f64>> {
    if !channels.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "positional encoding needs an even channel count, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut out = Vec::with_capacity(channels);
    for i in 1..=half {
        let f = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out.push((x * f).sin());
        out.push((x * f).cos());
    }
    Ok(out)
}
