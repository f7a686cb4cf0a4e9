//! Real spherical harmonics up to degree 1 for view-dependent color.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Y_0^0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Normalization of the three degree-1 basis functions.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const MAX_SH_DEGREE: usize = 1;

/// Number of basis functions for `degree`.
pub fn sh_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

pub fn sh_degree_of_len(len: usize) -> Result<usize> {
    match len {
        1 => Ok(0),
        4 => Ok(1),
        n => Err(Error::invalid(format!(
            "expected 1 or 4 SH coefficients per channel, got {n}"
        ))),
    }
}

/// Basis values for a unit direction, in coefficient order
/// `[Y00, Y1-1, Y10, Y11]`.
pub fn sh_basis(dir: &Vec3, degree: usize) -> [f64; 4] {
    let mut b = [SH_C0, 0.0, 0.0, 0.0];
    if degree >= 1 {
        b[1] = -SH_C1 * dir.y;
        b[2] = SH_C1 * dir.z;
        b[3] = -SH_C1 * dir.x;
    }
    b
}

/// Gradient of `sum_k g_k * basis_k(dir)` with respect to `dir`.
pub fn sh_basis_dir_vjp(g: &[f64; 4]) -> Vec3 {
    Vec3::new(-SH_C1 * g[3], -SH_C1 * g[1], SH_C1 * g[2])
}

/// Unclamped color: `sum_k coeff_k * Y_k(dir)` per channel. Each coefficient
/// holds the three color channels.
pub fn sh_eval_raw(coeffs: &[Vec3], dir: &Vec3) -> Vec3 {
    let degree = if coeffs.len() >= 4 { 1 } else { 0 };
    let b = sh_basis(dir, degree);
    coeffs
        .iter()
        .zip(b.iter())
        .fold(Vec3::zeros(), |acc, (c, y)| acc + c * *y)
}

/// View-dependent RGB clamped to `[0, 1]`. Degree 0 ignores `dir`.
pub fn sh_eval(coeffs: &[Vec3], dir: &Vec3, degree: usize) -> Vec3 {
    let n = sh_len(degree.min(MAX_SH_DEGREE)).min(coeffs.len());
    sh_eval_raw(&coeffs[..n], dir).map(|v| v.clamp(0.0, 1.0))
}

/// DC coefficient that renders as the constant color `rgb`.
pub fn dc_from_rgb(rgb: Vec3) -> Vec3 {
    rgb / SH_C0
}
