//! Reverse-mode gradients of image losses through the rasterizer.
//!
//! The upstream gradient on the RGB image is pushed back through the
//! compositing recurrence, the Gaussian falloff, the conic inverse, the EWA
//! projection and the activations, into every raw Gaussian parameter and
//! every camera parameter `(q, t, fov)`.
//!
//! Camera gradients reach the camera through three routes: the projected
//! mean, the projected covariance, and (for SH degree 1) the view direction
//! used for color. [`CameraGradParts`] keeps them apart so the split can be
//! checked against the combined chain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{focal_fov_derivative, rotmat_vjp, Camera, Mat2, Mat3, Vec2, Vec3};
use crate::image::Image;
use crate::params::{
    all_param_ids, camera_to_vec, gaussian_param_count, get_param, set_param, ParamClass, ParamId,
    CAMERA_PARAMS,
};
use crate::render::{rasterize, GaussianCloud, RenderOptions, RenderOutput, SplatInfo};
use crate::sh::{sh_basis, sh_basis_dir_vjp};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianGrad {
    /// d/d(r, theta, phi).
    pub position: [f64; 3],
    pub scale_raw: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity_raw: f64,
    pub sh: Vec<Vec3>,
}

impl GaussianGrad {
    fn zeros(sh_len: usize) -> Self {
        Self {
            sh: vec![Vec3::zeros(); sh_len],
            ..Default::default()
        }
    }

    pub fn to_vec(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.position);
        out.extend_from_slice(&self.scale_raw);
        out.extend_from_slice(&self.rotation);
        out.push(self.opacity_raw);
        for c in &self.sh {
            out.extend_from_slice(c.as_slice());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraGrad {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub fov: [f64; 2],
}

impl CameraGrad {
    pub fn to_array(&self) -> [f64; CAMERA_PARAMS] {
        let mut a = [0.0; CAMERA_PARAMS];
        a[..4].copy_from_slice(&self.rotation);
        a[4..7].copy_from_slice(&self.translation);
        a[7..].copy_from_slice(&self.fov);
        a
    }

    pub fn from_array(a: [f64; CAMERA_PARAMS]) -> Self {
        Self {
            rotation: [a[0], a[1], a[2], a[3]],
            translation: [a[4], a[5], a[6]],
            fov: [a[7], a[8]],
        }
    }

    fn add(&mut self, o: &CameraGrad) {
        let s = self.to_array();
        let o = o.to_array();
        let mut r = [0.0; CAMERA_PARAMS];
        for k in 0..CAMERA_PARAMS {
            r[k] = s[k] + o[k];
        }
        *self = Self::from_array(r);
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * k))
    }
}

/// Camera gradient split by the route it took through the projection.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CameraGradParts {
    pub via_mean: CameraGrad,
    pub via_cov: CameraGrad,
    /// View-direction dependence of SH color; zero at degree 0.
    pub via_color: CameraGrad,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientSet {
    pub gaussians: Vec<GaussianGrad>,
    pub camera: CameraGrad,
    pub camera_parts: CameraGradParts,
}

impl GradientSet {
    pub fn zeros_like(cloud: &GaussianCloud) -> Self {
        Self {
            gaussians: cloud
                .gaussians
                .iter()
                .map(|g| GaussianGrad::zeros(g.sh.len()))
                .collect(),
            ..Default::default()
        }
    }

    /// Flattened Gaussian gradients in the layout of [`crate::params::cloud_to_vec`].
    pub fn gaussian_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in &self.gaussians {
            g.to_vec(&mut v);
        }
        v
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Gaussian { index, slot } => {
                let mut v = Vec::new();
                self.gaussians[index].to_vec(&mut v);
                v[slot]
            }
            ParamId::Camera { slot } => self.camera.to_array()[slot],
        }
    }

    pub fn set(&mut self, id: ParamId, value: f64) {
        match id {
            ParamId::Gaussian { index, slot } => {
                let g = &mut self.gaussians[index];
                match slot {
                    0..=2 => g.position[slot] = value,
                    3..=5 => g.scale_raw[slot - 3] = value,
                    6..=9 => g.rotation[slot - 6] = value,
                    10 => g.opacity_raw = value,
                    s => g.sh[(s - 11) / 3][(s - 11) % 3] = value,
                }
            }
            ParamId::Camera { slot } => {
                let mut a = self.camera.to_array();
                a[slot] = value;
                self.camera = CameraGrad::from_array(a);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gaussian_vec().iter().all(|v| v.is_finite())
            && self.camera.to_array().iter().all(|v| v.is_finite())
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, k: f64) {
        for (a, b) in self.gaussians.iter_mut().zip(&other.gaussians) {
            for i in 0..3 {
                a.position[i] += k * b.position[i];
                a.scale_raw[i] += k * b.scale_raw[i];
            }
            for i in 0..4 {
                a.rotation[i] += k * b.rotation[i];
            }
            a.opacity_raw += k * b.opacity_raw;
            for (x, y) in a.sh.iter_mut().zip(&b.sh) {
                *x += y * k;
            }
        }
        self.camera.add(&other.camera.scaled(k));
        self.camera_parts
            .via_mean
            .add(&other.camera_parts.via_mean.scaled(k));
        self.camera_parts
            .via_cov
            .add(&other.camera_parts.via_cov.scaled(k));
        self.camera_parts
            .via_color
            .add(&other.camera_parts.via_color.scaled(k));
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        let g: f64 = self.gaussian_vec().iter().map(|v| v * v).sum();
        let c: f64 = self.camera.to_array().iter().map(|v| v * v).sum();
        (g + c).sqrt()
    }
}

/// A scalar loss on a rendered image with its image-space gradient.
pub trait ImageLoss: Sync {
    fn value(&self, out: &RenderOutput) -> Result<f64>;
    /// dL/d rgb, same shape as `out.rgb`.
    fn gradient(&self, out: &RenderOutput) -> Result<Image>;
}

/// `sum(weights * rgb)`: linear in the image.
pub struct WeightedSumLoss {
    pub weights: Image,
}

impl ImageLoss for WeightedSumLoss {
    fn value(&self, out: &RenderOutput) -> Result<f64> {
        out.rgb.check_same_shape(&self.weights)?;
        Ok(out
            .rgb
            .data
            .iter()
            .zip(&self.weights.data)
            .map(|(a, b)| a * b)
            .sum())
    }

    fn gradient(&self, out: &RenderOutput) -> Result<Image> {
        out.rgb.check_same_shape(&self.weights)?;
        Ok(self.weights.clone())
    }
}

/// `0.5 * sum((rgb - target)^2)`.
pub struct SquaredErrorLoss {
    pub target: Image,
}

impl ImageLoss for SquaredErrorLoss {
    fn value(&self, out: &RenderOutput) -> Result<f64> {
        out.rgb.check_same_shape(&self.target)?;
        Ok(0.5
            * out
                .rgb
                .data
                .iter()
                .zip(&self.target.data)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>())
    }

    fn gradient(&self, out: &RenderOutput) -> Result<Image> {
        out.rgb.check_same_shape(&self.target)?;
        let data = out
            .rgb
            .data
            .iter()
            .zip(&self.target.data)
            .map(|(a, b)| a - b)
            .collect();
        Image::from_data(out.rgb.width, out.rgb.height, 3, data)
    }
}

#[derive(Clone, Copy, Default)]
struct Accum {
    color: Vec3,
    opacity: f64,
    mean2: Vec2,
    /// Full-matrix gradient of the conic: (00, 01 = 10, 11).
    conic: [f64; 3],
    touched: bool,
}

fn accumulate_rows(
    out: &RenderOutput,
    d_rgb: &Image,
    rows: std::ops::Range<usize>,
    n: usize,
) -> Vec<Accum> {
    let mut acc = vec![Accum::default(); n];
    let width = out.rgb.width;
    let bg = out.background;
    for y in rows {
        let py = y as f64 + 0.5;
        for x in 0..width {
            let pix = y * width + x;
            let g = Vec3::new(
                d_rgb.data[3 * pix],
                d_rgb.data[3 * pix + 1],
                d_rgb.data[3 * pix + 2],
            );
            if g == Vec3::zeros() {
                continue;
            }
            let px = x as f64 + 0.5;
            let contribs = out.aux.pixel_contributions(pix);
            let mut g_t_next = g.dot(&bg);
            for c in contribs.iter().rev() {
                let gi = c.gaussian as usize;
                let s = out.aux.splats[gi]
                    .as_ref()
                    .expect("contributor was visible");
                let a = c.alpha;
                let t = c.transmittance;
                let gc = g.dot(&s.color);
                let entry = &mut acc[gi];
                entry.touched = true;
                entry.color += g * (a * t);
                let g_a = t * (gc - g_t_next);
                g_t_next = gc * a + g_t_next * (1.0 - a);

                let m = s.mean2();
                let d = Vec2::new(px - m.x, py - m.y);
                let q = &s.conic;
                let power =
                    q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y;
                let falloff = (-0.5 * power).exp();
                entry.opacity += g_a * falloff;
                let g_pow = -0.5 * g_a * s.opacity * falloff;
                entry.conic[0] += g_pow * d.x * d.x;
                entry.conic[1] += g_pow * d.x * d.y;
                entry.conic[2] += g_pow * d.y * d.y;
                let qd = q * d;
                entry.mean2 -= qd * (2.0 * g_pow);
            }
        }
    }
    acc
}

fn merge(into: &mut [Accum], from: &[Accum]) {
    for (a, b) in into.iter_mut().zip(from) {
        if !b.touched {
            continue;
        }
        a.touched = true;
        a.color += b.color;
        a.opacity += b.opacity;
        a.mean2 += b.mean2;
        for k in 0..3 {
            a.conic[k] += b.conic[k];
        }
    }
}

/// Gradients of `W, t, fx, fy` for one route, before the quaternion and fov
/// chains.
#[derive(Clone, Copy)]
struct RawCameraGrad {
    w: Mat3,
    t: Vec3,
    focal: (f64, f64),
}

impl RawCameraGrad {
    fn zero() -> Self {
        Self {
            w: Mat3::zeros(),
            t: Vec3::zeros(),
            focal: (0.0, 0.0),
        }
    }

    fn finish(&self, cam: &Camera) -> CameraGrad {
        let i = &cam.intrinsics;
        CameraGrad {
            rotation: rotmat_vjp(cam.extrinsics.rotation, &self.w),
            translation: [self.t.x, self.t.y, self.t.z],
            fov: [
                self.focal.0 * focal_fov_derivative(i.fov_x, i.width),
                self.focal.1 * focal_fov_derivative(i.fov_y, i.height),
            ],
        }
    }
}

/// Pulls a gradient on the Jacobian entries back to the camera-space point
/// and the focal lengths.
fn jacobian_vjp(
    g_j: &nalgebra::Matrix2x3<f64>,
    xc: &Vec3,
    focal: (f64, f64),
) -> (Vec3, (f64, f64)) {
    let (fx, fy) = focal;
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let gx = g_j[(0, 2)] * (-fx / z2);
    let gy = g_j[(1, 2)] * (-fy / z2);
    let gz = g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * (2.0 * fx * x / z3)
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * (2.0 * fy * y / z3);
    let gfx = g_j[(0, 0)] / z + g_j[(0, 2)] * (-x / z2);
    let gfy = g_j[(1, 1)] / z + g_j[(1, 2)] * (-y / z2);
    (Vec3::new(gx, gy, gz), (gfx, gfy))
}

struct SplatGrad {
    gaussian: GaussianGrad,
    full: RawCameraGrad,
    via_mean: RawCameraGrad,
    via_cov: RawCameraGrad,
    via_color: RawCameraGrad,
}

fn chain_splat(g: &crate::render::Gaussian, s: &SplatInfo, acc: &Accum, cam: &Camera) -> SplatGrad {
    let mut out = GaussianGrad::zeros(g.sh.len());
    let proj = &s.projection;
    let w = proj.world_to_cam;
    let xc = proj.cam_point;
    let j = proj.jacobian;
    let (fx, fy) = proj.focal;
    let z = xc.z;
    let p = s.world_mean;

    // opacity activation
    out.opacity_raw = acc.opacity * s.opacity * (1.0 - s.opacity);

    // color clamp and SH
    let g_raw = Vec3::from_fn(|k, _| {
        if s.color_raw[k] > 0.0 && s.color_raw[k] < 1.0 {
            acc.color[k]
        } else {
            0.0
        }
    });
    let degree = g.sh_degree();
    let basis = sh_basis(&s.view_dir, degree);
    for (k, coef) in out.sh.iter_mut().enumerate() {
        *coef = g_raw * basis[k];
    }
    let mut g_view = Vec3::zeros();
    if degree >= 1 {
        let mut gb = [0.0; 4];
        for (k, b) in gb.iter_mut().enumerate().skip(1) {
            *b = g.sh[k].dot(&g_raw);
        }
        let g_dir = sh_basis_dir_vjp(&gb);
        let d = s.view_dir;
        g_view = (g_dir - d * d.dot(&g_dir)) / s.view_dist;
    }

    // conic = inverse(cov2)
    let q = s.conic;
    let g_q = Mat2::new(acc.conic[0], acc.conic[1], acc.conic[1], acc.conic[2]);
    let g_cov2 = -(q * g_q * q);

    // mean route
    let g_xc_mean = j.transpose() * acc.mean2;
    let g_f_mean = (acc.mean2.x * xc.x / z, acc.mean2.y * xc.y / z);

    // covariance route: cov2 = T cov3 T^T + low-pass, T = J W
    let t_mat = j * w;
    let g_t_mat = 2.0 * g_cov2 * t_mat * s.cov3d;
    let g_j = g_t_mat * w.transpose();
    let g_w_cov = j.transpose() * g_t_mat;
    let (g_xc_cov, g_f_cov) = jacobian_vjp(&g_j, &xc, (fx, fy));
    let g_cov3 = t_mat.transpose() * g_cov2 * t_mat;

    // Gaussian position
    let g_xc = g_xc_mean + g_xc_cov;
    let g_p = w.transpose() * g_xc + g_view;
    let sph = g.position.jacobian().transpose() * g_p;
    out.position = [sph.x, sph.y, sph.z];

    // cov3 = M M^T, M = R S
    let m = g.cov_factor();
    let g_m = 2.0 * g_cov3 * m;
    let scale = g.scale();
    let r = crate::geometry::quat_to_rotmat(g.rotation);
    let mut g_r = Mat3::zeros();
    for col in 0..3 {
        let mut gs = 0.0;
        for row in 0..3 {
            g_r[(row, col)] = g_m[(row, col)] * scale[col];
            gs += g_m[(row, col)] * r[(row, col)];
        }
        out.scale_raw[col] = gs * scale[col];
    }
    out.rotation = rotmat_vjp(g.rotation, &g_r);

    // camera routes
    let t = cam.extrinsics.translation;
    let via_mean = RawCameraGrad {
        w: g_xc_mean * p.transpose(),
        t: g_xc_mean,
        focal: g_f_mean,
    };
    let via_cov = RawCameraGrad {
        w: g_xc_cov * p.transpose() + g_w_cov,
        t: g_xc_cov,
        focal: g_f_cov,
    };
    // camera center c = -W^T t; the view direction depends on p - c
    let g_center = -g_view;
    let via_color = RawCameraGrad {
        w: -(t * g_center.transpose()),
        t: -(w * g_center),
        focal: (0.0, 0.0),
    };
    let full = RawCameraGrad {
        w: g_xc * p.transpose() + g_w_cov - t * g_center.transpose(),
        t: g_xc - w * g_center,
        focal: (g_f_mean.0 + g_f_cov.0, g_f_mean.1 + g_f_cov.1),
    };
    SplatGrad {
        gaussian: out,
        full,
        via_mean,
        via_cov,
        via_color,
    }
}

const ROW_CHUNK: usize = 4;

/// Exact reverse-mode derivative of the render with respect to every raw
/// Gaussian parameter and every camera parameter.
///
/// `out` must come from [`rasterize`] on the same `cloud` and `cam`.
pub fn backward_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    out: &RenderOutput,
    d_rgb: &Image,
    opts: &RenderOptions,
) -> Result<GradientSet> {
    if out.aux.splats.len() != cloud.len() {
        return Err(Error::shape(format!(
            "render buffers cover {} gaussians, cloud has {}",
            out.aux.splats.len(),
            cloud.len()
        )));
    }
    if d_rgb.width != out.rgb.width || d_rgb.height != out.rgb.height || d_rgb.channels != 3 {
        return Err(Error::shape("image gradient does not match the render"));
    }
    if (
        cam.intrinsics.width as usize,
        cam.intrinsics.height as usize,
    ) != (out.rgb.width, out.rgb.height)
    {
        return Err(Error::shape("camera resolution does not match the render"));
    }
    let n = cloud.len();
    let height = out.rgb.height;
    let chunks: Vec<std::ops::Range<usize>> = (0..height)
        .step_by(ROW_CHUNK)
        .map(|y| y..(y + ROW_CHUNK).min(height))
        .collect();

    let acc = if opts.deterministic {
        let partials: Vec<Vec<Accum>> = chunks
            .into_par_iter()
            .map(|rows| accumulate_rows(out, d_rgb, rows, n))
            .collect();
        let mut total = vec![Accum::default(); n];
        for p in &partials {
            merge(&mut total, p);
        }
        total
    } else {
        chunks
            .into_par_iter()
            .fold(
                || vec![Accum::default(); n],
                |mut a, rows| {
                    merge(&mut a, &accumulate_rows(out, d_rgb, rows, n));
                    a
                },
            )
            .reduce(
                || vec![Accum::default(); n],
                |mut a, b| {
                    merge(&mut a, &b);
                    a
                },
            )
    };

    let per_splat: Vec<Option<SplatGrad>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let a = &acc[i];
            if !a.touched {
                return None;
            }
            let s = out.aux.splats[i].as_ref()?;
            Some(chain_splat(&cloud.gaussians[i], s, a, cam))
        })
        .collect();

    let mut grads = GradientSet::zeros_like(cloud);
    let mut full = RawCameraGrad::zero();
    let mut parts = [RawCameraGrad::zero(); 3];
    for (i, sg) in per_splat.into_iter().enumerate() {
        let Some(sg) = sg else { continue };
        grads.gaussians[i] = sg.gaussian;
        let add = |dst: &mut RawCameraGrad, src: &RawCameraGrad| {
            dst.w += src.w;
            dst.t += src.t;
            dst.focal.0 += src.focal.0;
            dst.focal.1 += src.focal.1;
        };
        add(&mut full, &sg.full);
        add(&mut parts[0], &sg.via_mean);
        add(&mut parts[1], &sg.via_cov);
        add(&mut parts[2], &sg.via_color);
    }
    grads.camera = full.finish(cam);
    grads.camera_parts = CameraGradParts {
        via_mean: parts[0].finish(cam),
        via_cov: parts[1].finish(cam),
        via_color: parts[2].finish(cam),
    };
    Ok(grads)
}

/// Renders, evaluates `loss` and back-propagates it.
pub fn loss_and_gradient(
    cloud: &GaussianCloud,
    cam: &Camera,
    loss: &dyn ImageLoss,
    opts: &RenderOptions,
) -> Result<(f64, GradientSet, RenderOutput)> {
    let out = rasterize(cloud, cam, opts)?;
    let value = loss.value(&out)?;
    let d_rgb = loss.gradient(&out)?;
    let grads = backward_render(cloud, cam, &out, &d_rgb, opts)?;
    Ok((value, grads, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdProbe {
    pub param: ParamId,
    /// Central difference, when both probes produced a finite loss.
    pub value: Option<f64>,
    /// A probe changed some pixel's contributor list.
    pub crossed_boundary: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FiniteDiff {
    pub gradient: GradientSet,
    pub probes: Vec<FdProbe>,
}

fn perturbed(
    cloud: &GaussianCloud,
    cam: &Camera,
    id: ParamId,
    value: f64,
) -> (GaussianCloud, Camera) {
    let mut c = cloud.clone();
    let mut k = *cam;
    set_param(&mut c, &mut k, id, value);
    // unit-norm constraint: probe on the sphere
    match id.class() {
        ParamClass::Rotation => {
            if let ParamId::Gaussian { index, .. } = id {
                c.gaussians[index].rotation = c.gaussians[index].rotation.normalized();
            }
        }
        ParamClass::CameraRotation => k.extrinsics.rotation = k.extrinsics.rotation.normalized(),
        _ => {}
    }
    (c, k)
}

/// Central differences `(L(x+h) - L(x-h)) / 2h` for every scalar parameter,
/// rendering deterministically. Quaternion probes are renormalized, which
/// yields the tangent-space projection of the ambient derivative.
pub fn finite_diff_grad(
    cloud: &GaussianCloud,
    cam: &Camera,
    loss: &dyn ImageLoss,
    h: f64,
) -> Result<FiniteDiff> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let opts = RenderOptions {
        deterministic: true,
        ..RenderOptions::default()
    };
    finite_diff_grad_with(cloud, cam, loss, h, &opts)
}

pub fn finite_diff_grad_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    loss: &dyn ImageLoss,
    h: f64,
    opts: &RenderOptions,
) -> Result<FiniteDiff> {
    let mut cloud = cloud.clone();
    let mut cam = *cam;
    // probe around the normalized point so +h and -h are symmetric on the sphere
    for g in cloud.gaussians.iter_mut() {
        g.rotation = g.rotation.normalized();
    }
    cam.extrinsics.rotation = cam.extrinsics.rotation.normalized();
    let base = rasterize(&cloud, &cam, opts)?;
    let ids = all_param_ids(&cloud);
    let probes: Vec<FdProbe> = ids
        .par_iter()
        .map(|&id| {
            let x = get_param(&cloud, &cam, id);
            let eval = |v: f64| -> Result<(f64, bool)> {
                let (c, k) = perturbed(&cloud, &cam, id, v);
                let out = rasterize(&c, &k, opts)?;
                let same = out.aux.same_contributors(&base.aux);
                Ok((loss.value(&out)?, same))
            };
            match (eval(x + h), eval(x - h)) {
                (Ok((lp, sp)), Ok((lm, sm))) => {
                    if lp.is_finite() && lm.is_finite() {
                        FdProbe {
                            param: id,
                            value: Some((lp - lm) / (2.0 * h)),
                            crossed_boundary: !(sp && sm),
                            error: None,
                        }
                    } else {
                        FdProbe {
                            param: id,
                            value: None,
                            crossed_boundary: !(sp && sm),
                            error: Some(format!("non-finite loss at probe ({lp}, {lm})")),
                        }
                    }
                }
                (Err(e), _) | (_, Err(e)) => FdProbe {
                    param: id,
                    value: None,
                    crossed_boundary: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut gradient = GradientSet::zeros_like(&cloud);
    for p in &probes {
        gradient.set(p.param, p.value.unwrap_or(f64::NAN));
    }
    Ok(FiniteDiff { gradient, probes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub param: String,
    pub class: ParamClass,
    pub analytic: f64,
    pub numeric: Option<f64>,
    pub rel_error: Option<f64>,
    /// Skipped because a probe crossed a truncation boundary.
    pub excluded: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: ParamClass,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
    pub classes: Vec<ClassSummary>,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        let tol = self.tolerance;
        self.entries
            .iter()
            .filter(move |e| !e.excluded && e.rel_error.map_or(e.error.is_some(), |r| !(r <= tol)))
    }
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
pub fn gradcheck(
    cloud: &GaussianCloud,
    cam: &Camera,
    loss: &dyn ImageLoss,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let render_opts = RenderOptions {
        deterministic: true,
        ..RenderOptions::default()
    };
    let mut cloud = cloud.clone();
    let mut cam = *cam;
    for g in cloud.gaussians.iter_mut() {
        g.rotation = g.rotation.normalized();
    }
    cam.extrinsics.rotation = cam.extrinsics.rotation.normalized();
    let (_, analytic, _) = loss_and_gradient(&cloud, &cam, loss, &render_opts)?;
    gradcheck_against(&cloud, &cam, loss, &analytic, opts)
}

/// Like [`gradcheck`] but with caller-supplied analytic gradients, which
/// must be taken at unit-norm quaternions.
pub fn gradcheck_against(
    cloud: &GaussianCloud,
    cam: &Camera,
    loss: &dyn ImageLoss,
    analytic: &GradientSet,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let fd = finite_diff_grad(cloud, cam, loss, opts.step)?;
    let mut entries = Vec::with_capacity(fd.probes.len());
    let mut classes: Vec<ClassSummary> = ParamClass::ALL
        .iter()
        .map(|&class| ClassSummary {
            class,
            checked: 0,
            excluded: 0,
            max_rel_error: 0.0,
        })
        .collect();
    let mut max_rel = 0.0f64;
    let mut failed_probe = false;
    for p in &fd.probes {
        let a = analytic.get(p.param);
        let class = p.param.class();
        let summary = classes
            .iter_mut()
            .find(|c| c.class == class)
            .expect("class listed");
        let rel = p.value.map(|f| relative_error(a, f));
        if p.crossed_boundary {
            summary.excluded += 1;
        } else if let Some(r) = rel {
            summary.checked += 1;
            summary.max_rel_error = summary.max_rel_error.max(r);
            if r.is_nan() {
                max_rel = f64::INFINITY;
            } else {
                max_rel = max_rel.max(r);
            }
        } else {
            failed_probe = true;
        }
        entries.push(GradcheckEntry {
            param: p.param.to_string(),
            class,
            analytic: a,
            numeric: p.value,
            rel_error: rel,
            excluded: p.crossed_boundary,
            error: p.error.clone(),
        });
    }
    let checked = classes.iter().map(|c| c.checked).sum();
    let excluded = classes.iter().map(|c| c.excluded).sum();
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        max_rel_error: max_rel,
        checked,
        excluded,
        passed: opts.tolerance == f64::INFINITY || (!failed_probe && max_rel <= opts.tolerance),
        classes,
        entries,
    })
}

/// Number of scalar parameters described by a gradient set of `cloud`.
pub fn param_count(cloud: &GaussianCloud) -> usize {
    cloud
        .gaussians
        .iter()
        .map(gaussian_param_count)
        .sum::<usize>()
        + CAMERA_PARAMS
}

/// Camera parameters as a flat array, for symmetric use with [`CameraGrad`].
pub fn camera_params(cam: &Camera) -> [f64; CAMERA_PARAMS] {
    camera_to_vec(cam)
}
