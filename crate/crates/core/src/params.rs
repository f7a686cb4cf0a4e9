//! Scalar addressing of every optimizable parameter.
//!
//! Gaussian parameters are laid out per Gaussian as
//! `[r, theta, phi, scale_raw x3, rotation wxyz, opacity_raw, sh...]` with
//! the SH block stored coefficient-major (`coef * 3 + channel`). Camera
//! parameters are `[rotation wxyz, translation xyz, fov_x, fov_y]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, Quaternion};
use crate::render::{Gaussian, GaussianCloud};

pub const CAMERA_PARAMS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    PositionR,
    PositionTheta,
    PositionPhi,
    ScaleRaw,
    Rotation,
    OpacityRaw,
    Sh,
    CameraRotation,
    CameraTranslation,
    CameraFov,
}

impl ParamClass {
    pub const ALL: [ParamClass; 10] = [
        ParamClass::PositionR,
        ParamClass::PositionTheta,
        ParamClass::PositionPhi,
        ParamClass::ScaleRaw,
        ParamClass::Rotation,
        ParamClass::OpacityRaw,
        ParamClass::Sh,
        ParamClass::CameraRotation,
        ParamClass::CameraTranslation,
        ParamClass::CameraFov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::PositionR => "position_r",
            ParamClass::PositionTheta => "position_theta",
            ParamClass::PositionPhi => "position_phi",
            ParamClass::ScaleRaw => "scale_raw",
            ParamClass::Rotation => "rotation",
            ParamClass::OpacityRaw => "opacity_raw",
            ParamClass::Sh => "sh",
            ParamClass::CameraRotation => "camera_rotation",
            ParamClass::CameraTranslation => "camera_translation",
            ParamClass::CameraFov => "camera_fov",
        }
    }

    pub fn is_camera(self) -> bool {
        matches!(
            self,
            ParamClass::CameraRotation | ParamClass::CameraTranslation | ParamClass::CameraFov
        )
    }
}

/// One scalar parameter: a Gaussian slot or a camera slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Gaussian { index: usize, slot: usize },
    Camera { slot: usize },
}

impl ParamId {
    pub fn class(self) -> ParamClass {
        match self {
            ParamId::Gaussian { slot, .. } => match slot {
                0 => ParamClass::PositionR,
                1 => ParamClass::PositionTheta,
                2 => ParamClass::PositionPhi,
                3..=5 => ParamClass::ScaleRaw,
                6..=9 => ParamClass::Rotation,
                10 => ParamClass::OpacityRaw,
                _ => ParamClass::Sh,
            },
            ParamId::Camera { slot } => match slot {
                0..=3 => ParamClass::CameraRotation,
                4..=6 => ParamClass::CameraTranslation,
                _ => ParamClass::CameraFov,
            },
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamId::Gaussian { index, slot } => {
                let class = self.class();
                let local = match class {
                    ParamClass::ScaleRaw => slot - 3,
                    ParamClass::Rotation => slot - 6,
                    ParamClass::Sh => slot - 11,
                    _ => 0,
                };
                write!(f, "gaussian[{index}].{}[{local}]", class.name())
            }
            ParamId::Camera { slot } => {
                let class = self.class();
                let local = match class {
                    ParamClass::CameraRotation => slot,
                    ParamClass::CameraTranslation => slot - 4,
                    _ => slot - 7,
                };
                write!(f, "camera.{}[{local}]", class.name())
            }
        }
    }
}

pub fn gaussian_param_count(g: &Gaussian) -> usize {
    11 + 3 * g.sh.len()
}

pub fn gaussian_to_vec(g: &Gaussian, out: &mut Vec<f64>) {
    out.extend_from_slice(&[g.position.r, g.position.theta, g.position.phi]);
    out.extend_from_slice(g.scale_raw.as_slice());
    out.extend_from_slice(&g.rotation.to_array());
    out.push(g.opacity_raw);
    for c in &g.sh {
        out.extend_from_slice(c.as_slice());
    }
}

/// Writes `values` back into `g`; returns the number consumed.
pub fn gaussian_from_slice(g: &mut Gaussian, values: &[f64]) -> usize {
    g.position.r = values[0];
    g.position.theta = values[1];
    g.position.phi = values[2];
    g.scale_raw.copy_from_slice(&values[3..6]);
    g.rotation = Quaternion::new(values[6], values[7], values[8], values[9]);
    g.opacity_raw = values[10];
    let mut k = 11;
    for c in g.sh.iter_mut() {
        c.copy_from_slice(&values[k..k + 3]);
        k += 3;
    }
    k
}

pub fn cloud_to_vec(cloud: &GaussianCloud) -> Vec<f64> {
    let mut v = Vec::with_capacity(cloud.gaussians.iter().map(gaussian_param_count).sum());
    for g in &cloud.gaussians {
        gaussian_to_vec(g, &mut v);
    }
    v
}

pub fn cloud_from_vec(cloud: &mut GaussianCloud, values: &[f64]) {
    let mut k = 0;
    for g in cloud.gaussians.iter_mut() {
        k += gaussian_from_slice(g, &values[k..]);
    }
    debug_assert_eq!(k, values.len());
}

pub fn camera_to_vec(cam: &Camera) -> [f64; CAMERA_PARAMS] {
    let q = cam.extrinsics.rotation.to_array();
    let t = cam.extrinsics.translation;
    [
        q[0],
        q[1],
        q[2],
        q[3],
        t.x,
        t.y,
        t.z,
        cam.intrinsics.fov_x,
        cam.intrinsics.fov_y,
    ]
}

pub fn camera_from_slice(cam: &mut Camera, v: &[f64]) {
    cam.extrinsics.rotation = Quaternion::new(v[0], v[1], v[2], v[3]);
    cam.extrinsics.translation.copy_from_slice(&v[4..7]);
    cam.intrinsics.fov_x = v[7];
    cam.intrinsics.fov_y = v[8];
}

/// Every scalar parameter of `cloud` and `cam`, Gaussians first.
pub fn all_param_ids(cloud: &GaussianCloud) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for (index, g) in cloud.gaussians.iter().enumerate() {
        for slot in 0..gaussian_param_count(g) {
            ids.push(ParamId::Gaussian { index, slot });
        }
    }
    for slot in 0..CAMERA_PARAMS {
        ids.push(ParamId::Camera { slot });
    }
    ids
}

pub fn get_param(cloud: &GaussianCloud, cam: &Camera, id: ParamId) -> f64 {
    match id {
        ParamId::Gaussian { index, slot } => {
            let mut v = Vec::new();
            gaussian_to_vec(&cloud.gaussians[index], &mut v);
            v[slot]
        }
        ParamId::Camera { slot } => camera_to_vec(cam)[slot],
    }
}

pub fn set_param(cloud: &mut GaussianCloud, cam: &mut Camera, id: ParamId, value: f64) {
    match id {
        ParamId::Gaussian { index, slot } => {
            let g = &mut cloud.gaussians[index];
            let mut v = Vec::new();
            gaussian_to_vec(g, &mut v);
            v[slot] = value;
            gaussian_from_slice(g, &v);
        }
        ParamId::Camera { slot } => {
            let mut v = camera_to_vec(cam);
            v[slot] = value;
            camera_from_slice(cam, &v);
        }
    }
}
