//! Forward rasterization of a Gaussian cloud.
//!
//! Per pixel `p` the visible Gaussians are composited front to back:
//!
//! ```text
//! a_i  = opacity_i * exp(-0.5 * d^T Sigma_i^-1 d),   d = p - mu_i
//! C(p) = sum_i color_i * a_i * T_i + T_final * background
//! T_{i+1} = T_i * (1 - a_i)
//! ```
//!
//! A Gaussian only touches pixels inside its 3-sigma ellipse, and a pixel
//! stops accumulating once its transmittance falls below
//! [`TRANSMITTANCE_CUTOFF`]. Every contribution that was actually used is
//! recorded in [`RenderAux`] so the backward pass can replay it exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    project_gaussian_full, quat_to_rotmat, spherical_to_cartesian, BBox3, Camera, Mat2, Mat3,
    ProjectionState, Quaternion, Spherical, Vec2, Vec3,
};
use crate::image::Image;
use crate::sh::{sh_degree_of_len, sh_eval_raw};

/// Activated opacity at `opacity_raw = 0`.
pub const OPACITY_AT_ZERO: f64 = 0.1;
/// Activated scale at `scale_raw = 0`, scene units.
pub const SCALE_AT_ZERO: f64 = 0.02;
/// Footprints are truncated at this many standard deviations.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// A pixel stops compositing once its transmittance drops below this.
pub const TRANSMITTANCE_CUTOFF: f64 = 1e-4;

const MAHALANOBIS_CUTOFF: f64 = FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn opacity_activation(raw: f64) -> f64 {
    sigmoid(raw + logit(OPACITY_AT_ZERO))
}

pub fn opacity_inverse(alpha: f64) -> f64 {
    logit(alpha) - logit(OPACITY_AT_ZERO)
}

pub fn scale_activation(raw: f64) -> f64 {
    (raw + SCALE_AT_ZERO.ln()).exp()
}

pub fn scale_inverse(scale: f64) -> f64 {
    scale.ln() - SCALE_AT_ZERO.ln()
}

/// One splat with its raw (pre-activation) optimizable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub position: Spherical,
    pub scale_raw: Vec3,
    pub rotation: Quaternion,
    pub opacity_raw: f64,
    /// One RGB triple per SH basis function (1 or 4 entries).
    pub sh: Vec<Vec3>,
}

impl Gaussian {
    pub fn mean(&self) -> Vec3 {
        spherical_to_cartesian(self.position)
    }

    pub fn opacity(&self) -> f64 {
        opacity_activation(self.opacity_raw)
    }

    pub fn scale(&self) -> Vec3 {
        self.scale_raw.map(scale_activation)
    }

    /// `R S S^T R^T`.
    pub fn covariance(&self) -> Mat3 {
        let m = self.cov_factor();
        m * m.transpose()
    }

    /// `R S`, the square root of the covariance.
    pub fn cov_factor(&self) -> Mat3 {
        quat_to_rotmat(self.rotation) * Mat3::from_diagonal(&self.scale())
    }

    pub fn sh_degree(&self) -> usize {
        if self.sh.len() >= 4 {
            1
        } else {
            0
        }
    }

    pub fn is_finite(&self) -> bool {
        let p = self.position;
        [p.r, p.theta, p.phi, self.opacity_raw]
            .iter()
            .all(|v| v.is_finite())
            && self.scale_raw.iter().all(|v| v.is_finite())
            && self.rotation.is_finite()
            && self.sh.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    /// Real-world size of the object in meters, when known.
    #[serde(default)]
    pub metric_extent: Option<BBox3>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            metric_extent: None,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.gaussians.iter().map(Gaussian::mean).collect()
    }

    pub fn mean_position(&self) -> Vec3 {
        if self.is_empty() {
            return Vec3::zeros();
        }
        self.positions().iter().sum::<Vec3>() / self.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (i, g) in self.gaussians.iter().enumerate() {
            sh_degree_of_len(g.sh.len())?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gaussian {i} has non-finite parameters"
                )));
            }
        }
        if let Some(b) = &self.metric_extent {
            if b.extent.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid(
                    "metric extent must be positive on every axis",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub background: [f64; 3],
    /// Bit-reproducible reductions in the backward pass.
    pub deterministic: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            background: [1.0, 1.0, 1.0],
            deterministic: true,
        }
    }
}

impl RenderOptions {
    pub fn background(&self) -> Vec3 {
        Vec3::from(self.background)
    }
}

/// Per-Gaussian projection data for a visible splat.
#[derive(Debug, Clone)]
pub struct SplatInfo {
    pub index: usize,
    pub world_mean: Vec3,
    pub cov3d: Mat3,
    pub projection: ProjectionState,
    /// Inverse of the projected covariance.
    pub conic: Mat2,
    pub opacity: f64,
    /// Color before clamping to `[0, 1]`.
    pub color_raw: Vec3,
    pub color: Vec3,
    /// Unit vector from the camera center to the mean.
    pub view_dir: Vec3,
    pub view_dist: f64,
    /// Pixel-space half extents of the truncated footprint.
    pub radius: Vec2,
}

impl SplatInfo {
    pub fn mean2(&self) -> Vec2 {
        self.projection.projected.mean
    }

    pub fn cov2(&self) -> Mat2 {
        self.projection.projected.cov
    }

    pub fn depth(&self) -> f64 {
        self.projection.projected.depth
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    pub gaussian: u32,
    /// Effective alpha of this splat at the pixel.
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

/// Everything the backward pass needs to replay a render.
#[derive(Debug, Clone)]
pub struct RenderAux {
    /// Visible Gaussians, front to back.
    pub order: Vec<usize>,
    /// Indexed by cloud position; `None` for culled Gaussians.
    pub splats: Vec<Option<SplatInfo>>,
    /// CSR offsets into `contributions`, one range per pixel (row-major).
    pub pixel_offsets: Vec<usize>,
    pub contributions: Vec<Contribution>,
    pub final_transmittance: Vec<f64>,
}

impl RenderAux {
    pub fn pixel_contributions(&self, pixel: usize) -> &[Contribution] {
        &self.contributions[self.pixel_offsets[pixel]..self.pixel_offsets[pixel + 1]]
    }

    /// Contributor sets are equal pixel by pixel.
    pub fn same_contributors(&self, other: &RenderAux) -> bool {
        self.pixel_offsets == other.pixel_offsets
            && self
                .contributions
                .iter()
                .zip(&other.contributions)
                .all(|(a, b)| a.gaussian == b.gaussian)
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub rgb: Image,
    pub alpha: Image,
    pub background: Vec3,
    pub aux: RenderAux,
}

impl RenderOutput {
    pub fn rgba(&self) -> Image {
        Image::rgba(&self.rgb, &self.alpha).expect("render buffers share a shape")
    }
}

/// Projects every Gaussian and returns the visible ones front to back.
///
/// Culls means behind the near plane and footprints whose 3-sigma box misses
/// the image. Equal depths keep storage order.
pub fn depth_sort_cull(cloud: &GaussianCloud, cam: &Camera) -> Vec<SplatInfo> {
    let mut visible: Vec<SplatInfo> = cloud
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| splat_info(i, g, cam))
        .collect();
    visible.sort_by(|a, b| a.depth().total_cmp(&b.depth()).then(a.index.cmp(&b.index)));
    visible
}

fn splat_info(index: usize, g: &Gaussian, cam: &Camera) -> Option<SplatInfo> {
    let world_mean = g.mean();
    let cov3d = g.covariance();
    let projection = project_gaussian_full(&world_mean, &cov3d, cam)?;
    let cov = projection.projected.cov;
    let det = cov.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Mat2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
    let radius = Vec2::new(
        FOOTPRINT_SIGMAS * cov[(0, 0)].sqrt(),
        FOOTPRINT_SIGMAS * cov[(1, 1)].sqrt(),
    );
    let m = projection.projected.mean;
    let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
    if m.x + radius.x < 0.0 || m.x - radius.x > w || m.y + radius.y < 0.0 || m.y - radius.y > h {
        return None;
    }
    let offset = world_mean - cam.center();
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 {
        offset / view_dist
    } else {
        Vec3::z()
    };
    let color_raw = sh_eval_raw(&g.sh, &view_dir);
    Some(SplatInfo {
        index,
        world_mean,
        cov3d,
        projection,
        conic,
        opacity: g.opacity(),
        color_raw,
        color: color_raw.map(|v| v.clamp(0.0, 1.0)),
        view_dir,
        view_dist,
        radius,
    })
}

struct RowResult {
    rgb: Vec<f64>,
    alpha: Vec<f64>,
    counts: Vec<usize>,
    contributions: Vec<Contribution>,
    final_t: Vec<f64>,
}

/// Renders `cloud` through `cam`. An empty or fully culled cloud yields the
/// background with zero alpha.
pub fn rasterize(
    cloud: &GaussianCloud,
    cam: &Camera,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    cam.intrinsics.validate()?;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!(
                "gaussian {i} has non-finite parameters"
            )));
        }
    }
    let width = cam.intrinsics.width as usize;
    let height = cam.intrinsics.height as usize;
    let bg = opts.background();
    let visible = depth_sort_cull(cloud, cam);

    // Bin splats by the rows their footprint box covers, keeping depth order.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (slot, s) in visible.iter().enumerate() {
        let m = s.mean2();
        let y0 = ((m.y - s.radius.y - 0.5).ceil().max(0.0)) as usize;
        let y1 = (m.y + s.radius.y - 0.5).floor();
        if y1 < 0.0 {
            continue;
        }
        let y1 = (y1 as usize).min(height.saturating_sub(1));
        for row in rows.iter_mut().take(y1 + 1).skip(y0) {
            row.push(slot as u32);
        }
    }

    let render_row = |y: usize| -> RowResult {
        let mut out = RowResult {
            rgb: vec![0.0; width * 3],
            alpha: vec![0.0; width],
            counts: vec![0; width],
            contributions: Vec::new(),
            final_t: vec![1.0; width],
        };
        let py = y as f64 + 0.5;
        for x in 0..width {
            let px = x as f64 + 0.5;
            let mut t = 1.0;
            let mut c = Vec3::zeros();
            let before = out.contributions.len();
            for &slot in &rows[y] {
                let s = &visible[slot as usize];
                let m = s.mean2();
                let d = Vec2::new(px - m.x, py - m.y);
                if d.x.abs() > s.radius.x {
                    continue;
                }
                let q = &s.conic;
                let power =
                    q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y;
                if power > MAHALANOBIS_CUTOFF {
                    continue;
                }
                let a = s.opacity * (-0.5 * power).exp();
                out.contributions.push(Contribution {
                    gaussian: s.index as u32,
                    alpha: a,
                    transmittance: t,
                });
                c += s.color * (a * t);
                t *= 1.0 - a;
                if t < TRANSMITTANCE_CUTOFF {
                    break;
                }
            }
            let rgb = c + bg * t;
            out.rgb[3 * x..3 * x + 3].copy_from_slice(rgb.as_slice());
            out.alpha[x] = 1.0 - t;
            out.final_t[x] = t;
            out.counts[x] = out.contributions.len() - before;
        }
        out
    };

    let row_results: Vec<RowResult> = (0..height).into_par_iter().map(render_row).collect();

    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut alpha = Vec::with_capacity(width * height);
    let mut final_transmittance = Vec::with_capacity(width * height);
    let mut pixel_offsets = Vec::with_capacity(width * height + 1);
    let total: usize = row_results.iter().map(|r| r.contributions.len()).sum();
    let mut contributions = Vec::with_capacity(total);
    pixel_offsets.push(0);
    for r in row_results {
        rgb.extend_from_slice(&r.rgb);
        alpha.extend_from_slice(&r.alpha);
        final_transmittance.extend_from_slice(&r.final_t);
        let mut acc = contributions.len();
        for n in r.counts {
            acc += n;
            pixel_offsets.push(acc);
        }
        contributions.extend(r.contributions);
    }

    let order = visible.iter().map(|s| s.index).collect();
    let mut splats: Vec<Option<SplatInfo>> = vec![None; cloud.len()];
    for s in visible {
        let i = s.index;
        splats[i] = Some(s);
    }

    Ok(RenderOutput {
        rgb: Image::from_data(width, height, 3, rgb)?,
        alpha: Image::from_data(width, height, 1, alpha)?,
        background: bg,
        aux: RenderAux {
            order,
            splats,
            pixel_offsets,
            contributions,
            final_transmittance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cartesian_to_spherical, CameraExtrinsics, CameraIntrinsics};
    use crate::sh::dc_from_rgb;
    use rand::{Rng, SeedableRng};

    fn front_camera(size: u32) -> Camera {
        Camera::new(
            CameraExtrinsics {
                rotation: Quaternion::IDENTITY,
                translation: Vec3::new(0.0, 0.0, 2.0),
            },
            CameraIntrinsics::square(1.0, size),
        )
    }

    fn gaussian_at(p: Vec3, scale: f64, alpha: f64, rgb: Vec3) -> Gaussian {
        Gaussian {
            position: cartesian_to_spherical(p),
            scale_raw: Vec3::repeat(scale_inverse(scale)),
            rotation: Quaternion::IDENTITY,
            opacity_raw: opacity_inverse(alpha),
            sh: vec![dc_from_rgb(rgb)],
        }
    }

    #[test]
    fn activations_at_zero() {
        assert!((opacity_activation(0.0) - 0.1).abs() < 1e-15);
        assert!((scale_activation(0.0) - 0.02).abs() < 1e-15);
        assert!((opacity_activation(opacity_inverse(0.73)) - 0.73).abs() < 1e-14);
        assert!((scale_activation(scale_inverse(0.3)) - 0.3).abs() < 1e-14);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn empty_scene_is_background() {
        let cam = front_camera(8);
        // a Gaussian behind the camera
        let cloud = GaussianCloud::new(vec![gaussian_at(
            Vec3::new(0.0, 0.0, -3.0),
            0.1,
            0.9,
            Vec3::zeros(),
        )]);
        let out = rasterize(&cloud, &cam, &RenderOptions::default()).unwrap();
        assert!(out.rgb.data.iter().all(|v| *v == 1.0));
        assert!(out.alpha.data.iter().all(|v| *v == 0.0));
        assert!(out.aux.contributions.is_empty());
        let out = rasterize(&GaussianCloud::default(), &cam, &RenderOptions::default()).unwrap();
        assert!(out.alpha.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_gaussian_closed_form() {
        let cam = front_camera(16);
        let color = Vec3::new(0.8, 0.3, 0.1);
        let alpha = 0.9;
        let scale = 0.05;
        let cloud = GaussianCloud::new(vec![gaussian_at(Vec3::zeros(), scale, alpha, color)]);
        let opts = RenderOptions {
            background: [0.2, 0.4, 0.6],
            deterministic: true,
        };
        let out = rasterize(&cloud, &cam, &opts).unwrap();
        let f = 8.0 / 0.5f64.tan();
        let var = (f * scale / 2.0).powi(2) + 0.3;
        // pixel (8, 8) has its center at (8.5, 8.5); the mean sits at (8, 8)
        let d2 = 0.5 * 0.5 * 2.0;
        let a = alpha * (-0.5 * d2 / var).exp();
        let bg = Vec3::new(0.2, 0.4, 0.6);
        let expect = color * a + bg * (1.0 - a);
        for c in 0..3 {
            assert!((out.rgb.get(8, 8, c) - expect[c]).abs() < 1e-12);
        }
        assert!((out.alpha.get(8, 8, 0) - a).abs() < 1e-12);
    }

    #[test]
    fn opaque_front_hides_back() {
        let cam = front_camera(16);
        let front = gaussian_at(
            Vec3::new(0.0, 0.0, -0.5),
            0.2,
            0.99999,
            Vec3::new(1.0, 0.0, 0.0),
        );
        let back = gaussian_at(Vec3::new(0.0, 0.0, 0.5), 0.2, 0.9, Vec3::new(0.0, 1.0, 0.0));
        let cloud = GaussianCloud::new(vec![back, front]);
        let opts = RenderOptions {
            background: [0.0; 3],
            deterministic: true,
        };
        let out = rasterize(&cloud, &cam, &opts).unwrap();
        assert_eq!(out.aux.order, vec![1, 0]);
        let px = 8 * 16 + 8;
        let weight = |g: u32| -> f64 {
            out.aux
                .pixel_contributions(px)
                .iter()
                .filter(|c| c.gaussian == g)
                .map(|c| c.alpha * c.transmittance)
                .sum()
        };
        assert!(weight(1) > 0.9);
        assert!(weight(0) < 0.1 * weight(1));
        assert!(out.rgb.get(8, 8, 1) < 0.1 * out.rgb.get(8, 8, 0));
    }

    fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let gaussians = (0..n)
            .map(|_| {
                let p = Vec3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                );
                let mut g = gaussian_at(
                    p,
                    rng.random_range(0.03..0.15),
                    rng.random_range(0.2..0.95),
                    Vec3::new(rng.random(), rng.random(), rng.random()),
                );
                g.rotation =
                    Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random())
                        .normalized();
                g.scale_raw += Vec3::new(
                    rng.random_range(-0.5..0.5),
                    0.0,
                    rng.random_range(-0.5..0.5),
                );
                g
            })
            .collect();
        GaussianCloud::new(gaussians)
    }

    #[test]
    fn depth_sort_matches_pairwise_oracle() {
        let cam = Camera::look_at(
            Vec3::new(1.2, -1.0, 0.4),
            Vec3::zeros(),
            CameraIntrinsics::square(1.1, 32),
        );
        let cloud = random_cloud(60, 7);
        let order: Vec<usize> = depth_sort_cull(&cloud, &cam)
            .iter()
            .map(|s| s.index)
            .collect();
        let depth = |i: usize| cam.extrinsics.world_to_camera(&cloud.gaussians[i].mean()).z;
        // every pair is ordered by (depth, index)
        for a in 0..order.len() {
            for b in a + 1..order.len() {
                let (i, j) = (order[a], order[b]);
                assert!(depth(i) < depth(j) || (depth(i) == depth(j) && i < j));
            }
        }
    }

    #[test]
    fn equal_depths_keep_storage_order() {
        let cam = front_camera(16);
        let a = gaussian_at(Vec3::new(-0.1, 0.0, 0.0), 0.05, 0.5, Vec3::zeros());
        let b = gaussian_at(Vec3::new(0.1, 0.0, 0.0), 0.05, 0.5, Vec3::zeros());
        let near = gaussian_at(Vec3::new(0.0, 0.0, -1.0), 0.05, 0.5, Vec3::zeros());
        let cloud = GaussianCloud::new(vec![a, b, near]);
        let order: Vec<usize> = depth_sort_cull(&cloud, &cam)
            .iter()
            .map(|s| s.index)
            .collect();
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn weights_and_transmittance_sum_to_one() {
        let cam = Camera::look_at(
            Vec3::new(0.4, -1.6, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 24),
        );
        let cloud = random_cloud(40, 11);
        let out = rasterize(&cloud, &cam, &RenderOptions::default()).unwrap();
        for p in 0..24 * 24 {
            let w: f64 = out
                .aux
                .pixel_contributions(p)
                .iter()
                .map(|c| c.alpha * c.transmittance)
                .sum();
            assert!((w + out.aux.final_transmittance[p] - 1.0).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&out.alpha.data[p]));
        }
    }

    #[test]
    fn permuting_storage_leaves_image_unchanged() {
        let cam = Camera::look_at(
            Vec3::new(0.4, -1.6, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 24),
        );
        let cloud = random_cloud(30, 5);
        let mut shuffled = cloud.clone();
        shuffled.gaussians.reverse();
        let a = rasterize(&cloud, &cam, &RenderOptions::default()).unwrap();
        let b = rasterize(&shuffled, &cam, &RenderOptions::default()).unwrap();
        assert!(a
            .rgb
            .data
            .iter()
            .zip(&b.rgb.data)
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rendering_is_bit_reproducible() {
        let cam = Camera::look_at(
            Vec3::new(0.4, -1.6, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 24),
        );
        let cloud = random_cloud(30, 9);
        let a = rasterize(&cloud, &cam, &RenderOptions::default()).unwrap();
        let b = rasterize(&cloud, &cam, &RenderOptions::default()).unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);
        assert_eq!(a.alpha.data, b.alpha.data);
    }

    #[test]
    fn more_opacity_never_lowers_own_weight() {
        let cam = Camera::look_at(
            Vec3::new(0.4, -1.6, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 24),
        );
        let cloud = random_cloud(20, 13);
        let weights = |c: &GaussianCloud, target: u32| -> Vec<f64> {
            let out = rasterize(c, &cam, &RenderOptions::default()).unwrap();
            (0..24 * 24)
                .map(|p| {
                    out.aux
                        .pixel_contributions(p)
                        .iter()
                        .filter(|k| k.gaussian == target)
                        .map(|k| k.alpha * k.transmittance)
                        .sum()
                })
                .collect()
        };
        for target in [0u32, 7, 15] {
            let before = weights(&cloud, target);
            let mut more = cloud.clone();
            more.gaussians[target as usize].opacity_raw += 0.7;
            let after = weights(&more, target);
            for (b, a) in before.iter().zip(&after) {
                if *b > 0.0 {
                    assert!(a >= b, "weight dropped {b} -> {a}");
                }
            }
        }
    }
}
