//! Synthetic scenes: orbit cameras, ground-truth clouds, rendered datasets
//! and their on-disk layout.
//!
//! A dataset directory holds
//!
//! * `cameras.json`: a list of `{quaternion: [w,x,y,z], translation: [x,y,z],
//!   fov_x, fov_y, width, height}`;
//! * `images/NNNN.png`: 8-bit RGBA renders, plus `images/NNNN.f64` with the
//!   exact values (little-endian, row-major RGBA);
//! * `cloud.json`: the ground-truth cloud, one flat raw-parameter row per
//!   Gaussian in the order given by its `field_order` entry;
//! * `meta.json`: seed, generator config and metric extent.
//!
//! Floats are written in their shortest exactly-round-tripping decimal form.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_to_spherical, compute_bbox, BBox3, Camera, CameraExtrinsics, CameraIntrinsics,
    Quaternion, Vec3,
};
use crate::image::Image;
use crate::params::{gaussian_from_slice, gaussian_param_count, gaussian_to_vec};
use crate::render::{
    opacity_inverse, rasterize, scale_inverse, Gaussian, GaussianCloud, RenderOptions,
};
use crate::sh::{dc_from_rgb, sh_len};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitConfig {
    pub orbits: usize,
    pub views_per_orbit: usize,
    /// Polar angle from +z, degrees.
    pub elevation_deg: [f64; 2],
    pub radius: [f64; 2],
    pub fov_deg: [f64; 2],
    /// Look-at points are drawn at a distance in this range from the origin.
    pub lookat_jitter: [f64; 2],
    /// Random azimuth offset in `(-pi/V, pi/V)` per view.
    pub azimuth_jitter: bool,
    pub resolution: u32,
    pub seed: u64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            orbits: 4,
            views_per_orbit: 32,
            elevation_deg: [75.0, 90.0],
            radius: [1.2, 1.8],
            fov_deg: [50.0, 70.0],
            lookat_jitter: [0.0, 0.1],
            azimuth_jitter: true,
            resolution: 64,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::invalid(format!(
            "{name} range [{}, {}] must be ordered and inside [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl OrbitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.orbits == 0 || self.views_per_orbit == 0 {
            return Err(Error::invalid("orbit and view counts must be at least 1"));
        }
        if self.resolution == 0 {
            return Err(Error::invalid("resolution must be at least 1"));
        }
        check_range("elevation_deg", self.elevation_deg, 0.0, 180.0)?;
        check_range("radius", self.radius, f64::MIN_POSITIVE, f64::MAX)?;
        check_range("fov_deg", self.fov_deg, f64::MIN_POSITIVE, 179.999)?;
        check_range("lookat_jitter", self.lookat_jitter, 0.0, f64::MAX)?;
        if self.lookat_jitter[1] >= self.radius[0] {
            return Err(Error::invalid(
                "look-at jitter must stay inside the smallest orbit radius",
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn unit_vector(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Camera centers `r [sin(phi) cos(theta), sin(phi) sin(theta), cos(phi)]`
/// with `theta = 2 pi j / V + delta_j`, one elevation and FOV per orbit, one
/// radius per view, each camera aimed at a jittered point near the origin.
pub fn sample_orbit_cameras(cfg: &OrbitConfig) -> Result<Vec<Camera>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = cfg.views_per_orbit;
    let mut cams = Vec::with_capacity(cfg.orbits * v);
    for _ in 0..cfg.orbits {
        let phi = uniform(&mut rng, cfg.elevation_deg).to_radians();
        let fov = uniform(&mut rng, cfg.fov_deg).to_radians();
        let intr = CameraIntrinsics::square(fov, cfg.resolution);
        for j in 0..v {
            let delta = if cfg.azimuth_jitter {
                rng.random_range(-PI / v as f64..PI / v as f64)
            } else {
                0.0
            };
            let theta = 2.0 * PI * j as f64 / v as f64 + delta;
            let r = uniform(&mut rng, cfg.radius);
            let c = r * Vec3::new(phi.sin() * theta.cos(), phi.sin() * theta.sin(), phi.cos());
            let dir = unit_vector(&mut rng);
            let r_o = uniform(&mut rng, cfg.lookat_jitter);
            cams.push(Camera::look_at(c, r_o * dir, intr));
        }
    }
    Ok(cams)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum CloudStyle {
    /// Uniform in a ball of radius 0.5.
    #[default]
    Blob,
    /// Radii uniform in `[inner, outer]`.
    Shell { inner: f64, outer: f64 },
}

pub const BLOB_RADIUS: f64 = 0.5;
const SCALE_RANGE: [f64; 2] = [0.04, 0.09];
const OPACITY_RANGE: [f64; 2] = [0.6, 0.95];
const COLOR_RANGE: [f64; 2] = [0.1, 0.9];
/// Meters per scene unit for synthetic metric extents.
pub const SYNTH_METERS_PER_UNIT: f64 = 4.0;

fn rotate_about(axis: &Vec3, v: &Vec3, angle: f64) -> Vec3 {
    v * angle.cos() + axis.cross(v) * angle.sin() + axis * axis.dot(v) * (1.0 - angle.cos())
}

fn sample_positions(n: usize, style: CloudStyle, rng: &mut impl Rng) -> Result<Vec<Vec3>> {
    match style {
        CloudStyle::Blob => Ok((0..n)
            .map(|_| loop {
                let p = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if p.norm_squared() <= 1.0 {
                    break p * BLOB_RADIUS;
                }
            })
            .collect()),
        CloudStyle::Shell { inner, outer } => {
            if !(inner > 0.0 && inner <= outer && outer <= 1.0) {
                return Err(Error::invalid(format!(
                    "shell radii must satisfy 0 < inner <= outer <= 1, got [{inner}, {outer}]"
                )));
            }
            // Antithetic pairs (and one balanced triple for odd n) keep the
            // centroid at the origin so re-centering cannot leave the annulus.
            let mut out = Vec::with_capacity(n);
            let mut left = n;
            if n % 2 == 1 && n >= 3 {
                let r = uniform(rng, [inner, outer]);
                let axis = unit_vector(rng);
                let u = axis.cross(&unit_vector(rng)).normalize();
                for k in 0..3 {
                    out.push(r * rotate_about(&axis, &u, 2.0 * PI * k as f64 / 3.0));
                }
                left -= 3;
            }
            while left >= 2 {
                let p = uniform(rng, [inner, outer]) * unit_vector(rng);
                out.push(p);
                out.push(-p);
                left -= 2;
            }
            if left == 1 {
                out.push(uniform(rng, [inner, outer]) * unit_vector(rng));
            }
            Ok(out)
        }
    }
}

fn random_quaternion(rng: &mut impl Rng) -> Quaternion {
    loop {
        let q = Quaternion::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if q.norm() > 1e-6 {
            return q.normalized();
        }
    }
}

/// Seeded ground-truth cloud inside the unit sphere with its centroid at the
/// origin. `sh_degree` is 0 or 1.
pub fn make_synthetic_cloud(
    n: usize,
    seed: u64,
    style: CloudStyle,
    sh_degree: usize,
) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::invalid(
            "synthetic cloud needs at least one Gaussian",
        ));
    }
    if sh_degree > 1 {
        return Err(Error::invalid(format!(
            "SH degree {sh_degree} not supported"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = sample_positions(n, style, &mut rng)?;
    let mean = pos.iter().sum::<Vec3>() / n as f64;
    for p in pos.iter_mut() {
        *p -= mean;
    }
    let gaussians = pos
        .iter()
        .map(|p| {
            let scale_raw = Vec3::from_fn(|_, _| scale_inverse(uniform(&mut rng, SCALE_RANGE)));
            let rotation = random_quaternion(&mut rng);
            let opacity_raw = opacity_inverse(uniform(&mut rng, OPACITY_RANGE));
            let rgb = Vec3::from_fn(|_, _| uniform(&mut rng, COLOR_RANGE));
            let mut sh = vec![dc_from_rgb(rgb)];
            for _ in 1..sh_len(sh_degree) {
                sh.push(Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1)));
            }
            Gaussian {
                position: cartesian_to_spherical(*p),
                scale_raw,
                rotation,
                opacity_raw,
                sh,
            }
        })
        .collect();
    let mut cloud = GaussianCloud::new(gaussians);
    let bbox = compute_bbox(&cloud.positions())?;
    cloud.metric_extent = Some(BBox3 {
        extent: bbox.extent.map(|e| {
            if e > 0.0 {
                e * SYNTH_METERS_PER_UNIT
            } else {
                SYNTH_METERS_PER_UNIT
            }
        }),
    });
    Ok(cloud)
}

/// Seeded single-view scene for gradient checks: a blob of `n` Gaussians
/// seen from a random direction at distance 2 to 2.5.
pub fn random_scene(
    n: usize,
    resolution: u32,
    sh_degree: usize,
    seed: u64,
) -> Result<(GaussianCloud, Camera)> {
    let cloud = make_synthetic_cloud(n, seed, CloudStyle::Blob, sh_degree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let center = unit_vector(&mut rng) * uniform(&mut rng, [2.0, 2.5]);
    let fov = uniform(&mut rng, [40.0, 60.0]).to_radians();
    let cam = Camera::look_at(
        center,
        Vec3::zeros(),
        CameraIntrinsics::square(fov, resolution),
    );
    Ok((cloud, cam))
}

/// Fixed four-Gaussian, degree-1 scene at 16 x 16 used by the gradient check
/// command.
pub fn gradcheck_fixture() -> (GaussianCloud, Camera) {
    let rows: [([f64; 3], [f64; 3], [f64; 4], f64, [f64; 3], [f64; 9]); 4] = [
        (
            [0.0, 0.0, 0.0],
            [0.22, 0.16, 0.12],
            [0.95, 0.1, -0.2, 0.2],
            0.7,
            [0.8, 0.3, 0.2],
            [0.05, -0.02, 0.03, 0.0, 0.04, -0.01, 0.02, 0.01, -0.03],
        ),
        (
            [0.3, 0.1, 0.15],
            [0.12, 0.18, 0.1],
            [0.8, -0.3, 0.4, 0.1],
            0.55,
            [0.2, 0.7, 0.3],
            [-0.04, 0.02, 0.01, 0.03, -0.02, 0.05, 0.0, -0.01, 0.02],
        ),
        (
            [-0.25, -0.15, 0.1],
            [0.15, 0.14, 0.2],
            [0.7, 0.2, 0.1, -0.6],
            0.8,
            [0.25, 0.35, 0.85],
            [0.02, 0.03, -0.04, -0.01, 0.0, 0.02, 0.03, -0.02, 0.01],
        ),
        (
            [0.05, 0.2, -0.25],
            [0.18, 0.1, 0.14],
            [0.6, 0.5, -0.3, 0.4],
            0.45,
            [0.9, 0.8, 0.2],
            [0.01, -0.03, 0.02, 0.04, 0.01, -0.02, -0.05, 0.02, 0.0],
        ),
    ];
    let gaussians = rows
        .iter()
        .map(|(p, s, q, a, rgb, sh1)| {
            let mut sh = vec![dc_from_rgb(Vec3::from(*rgb))];
            for k in 0..3 {
                sh.push(Vec3::new(sh1[3 * k], sh1[3 * k + 1], sh1[3 * k + 2]));
            }
            Gaussian {
                position: cartesian_to_spherical(Vec3::from(*p)),
                scale_raw: Vec3::from(*s).map(scale_inverse),
                rotation: Quaternion::new(q[0], q[1], q[2], q[3]).normalized(),
                opacity_raw: opacity_inverse(*a),
                sh,
            }
        })
        .collect();
    let cam = Camera::look_at(
        Vec3::new(0.4, -2.2, 0.7),
        Vec3::new(0.0, 0.0, 0.05),
        CameraIntrinsics::square(50f64.to_radians(), 16),
    );
    (GaussianCloud::new(gaussians), cam)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    /// Echo of whatever generated the dataset.
    pub config: serde_json::Value,
    pub metric_extent: Option<BBox3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// RGBA renders, one per camera.
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub cloud: Option<GaussianCloud>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn rgb(&self, view: usize) -> Result<Image> {
        self.images[view].rgb_part()
    }
}

/// Renders every camera at `resolution` x `resolution`.
pub fn render_dataset(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    resolution: u32,
    opts: &RenderOptions,
) -> Result<Dataset> {
    if resolution == 0 {
        return Err(Error::invalid("resolution must be at least 1"));
    }
    let cams: Vec<Camera> = cameras
        .iter()
        .map(|c| {
            let mut c = *c;
            c.intrinsics.width = resolution;
            c.intrinsics.height = resolution;
            c
        })
        .collect();
    let images = cams
        .par_iter()
        .map(|c| rasterize(cloud, c, opts).map(|o| o.rgba()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        cameras: cams,
        cloud: Some(cloud.clone()),
        meta: DatasetMeta {
            seed: 0,
            config: serde_json::Value::Null,
            metric_extent: cloud.metric_extent,
        },
    })
}

/// Composes each camera with a random rotation of at most `rot_deg_max`
/// degrees about its own center and moves the center by at most
/// `trans_frac_max * |c|`. Intrinsics are kept.
pub fn perturb_cameras(
    cameras: &[Camera],
    rot_deg_max: f64,
    trans_frac_max: f64,
    seed: u64,
) -> Result<Vec<Camera>> {
    if !(rot_deg_max >= 0.0 && trans_frac_max >= 0.0) {
        return Err(Error::invalid("perturbation bounds must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(cameras
        .iter()
        .map(|cam| {
            let axis = unit_vector(&mut rng);
            let angle = rng.random_range(0.0..=1.0) * rot_deg_max.to_radians();
            let dir = unit_vector(&mut rng);
            let frac = rng.random_range(0.0..=1.0) * trans_frac_max;
            if rot_deg_max == 0.0 && trans_frac_max == 0.0 {
                return *cam;
            }
            let c = cam.center();
            let q = cam
                .extrinsics
                .rotation
                .mul(Quaternion::from_axis_angle(axis, angle))
                .normalized();
            let center = c + dir * (frac * c.norm());
            Camera::new(
                CameraExtrinsics::from_rotation_center(q, center),
                cam.intrinsics,
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub fov_x: f64,
    pub fov_y: f64,
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        let t = c.extrinsics.translation;
        Self {
            quaternion: c.extrinsics.rotation.to_array(),
            translation: [t.x, t.y, t.z],
            fov_x: c.intrinsics.fov_x,
            fov_y: c.intrinsics.fov_y,
            width: c.intrinsics.width,
            height: c.intrinsics.height,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        let cam = Camera::new(
            CameraExtrinsics {
                rotation: Quaternion::from_array(self.quaternion),
                translation: Vec3::from(self.translation),
            },
            CameraIntrinsics {
                fov_x: self.fov_x,
                fov_y: self.fov_y,
                width: self.width,
                height: self.height,
            },
        );
        cam.intrinsics.validate()?;
        if !cam.extrinsics.rotation.is_finite() || cam.extrinsics.rotation.norm() == 0.0 {
            return Err(Error::invalid(
                "camera quaternion must be finite and non-zero",
            ));
        }
        Ok(cam)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudFile {
    pub field_order: String,
    pub sh_degree: usize,
    pub metric_extent: Option<[f64; 3]>,
    pub gaussians: Vec<Vec<f64>>,
}

const FIELD_ORDER: &str = "r theta phi scale_raw[3] rotation[w x y z] opacity_raw sh[coef][rgb]";

impl CloudFile {
    pub fn from_cloud(cloud: &GaussianCloud) -> Self {
        Self {
            field_order: FIELD_ORDER.to_string(),
            sh_degree: cloud.gaussians.first().map_or(0, Gaussian::sh_degree),
            metric_extent: cloud
                .metric_extent
                .map(|b| [b.extent.x, b.extent.y, b.extent.z]),
            gaussians: cloud
                .gaussians
                .iter()
                .map(|g| {
                    let mut v = Vec::with_capacity(gaussian_param_count(g));
                    gaussian_to_vec(g, &mut v);
                    v
                })
                .collect(),
        }
    }

    pub fn to_cloud(&self) -> Result<GaussianCloud> {
        if self.sh_degree > 1 {
            return Err(Error::invalid(format!(
                "SH degree {} not supported",
                self.sh_degree
            )));
        }
        let k = sh_len(self.sh_degree);
        let mut gs = Vec::with_capacity(self.gaussians.len());
        for (i, row) in self.gaussians.iter().enumerate() {
            let mut g = Gaussian {
                position: crate::geometry::Spherical::new(0.0, 0.0, 0.0),
                scale_raw: Vec3::zeros(),
                rotation: Quaternion::IDENTITY,
                opacity_raw: 0.0,
                sh: vec![Vec3::zeros(); k],
            };
            if row.len() != gaussian_param_count(&g) {
                return Err(Error::shape(format!(
                    "gaussian {i} has {} values, expected {}",
                    row.len(),
                    gaussian_param_count(&g)
                )));
            }
            gaussian_from_slice(&mut g, row);
            gs.push(g);
        }
        let mut cloud = GaussianCloud::new(gs);
        cloud.metric_extent = self.metric_extent.map(|e| BBox3 {
            extent: Vec3::from(e),
        });
        cloud.validate()?;
        Ok(cloud)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    let recs: Vec<CameraRecord> = cams.iter().map(CameraRecord::from).collect();
    write_json(path, &recs)
}

pub fn load_cameras(path: &Path) -> Result<Vec<Camera>> {
    let recs: Vec<CameraRecord> = read_json(path)?;
    recs.iter().map(CameraRecord::to_camera).collect()
}

pub fn save_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_json(path, &CloudFile::from_cloud(cloud))
}

pub fn load_cloud(path: &Path) -> Result<GaussianCloud> {
    read_json::<CloudFile>(path)?.to_cloud()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB or RGBA image as 8-bit PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width as u32, img.height as u32);
    let bytes: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
    let res = match img.channels {
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        4 => image::RgbaImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::invalid(format!("cannot write a {c}-channel PNG"))),
    };
    match res {
        Some(r) => r.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(Error::shape("image buffer does not match its dimensions")),
    }
}

/// Reads a PNG as RGBA in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgba8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| b as f64 / 255.0)
        .collect();
    Image::from_data(w as usize, h as usize, 4, data)
}

/// Lossless dump: `u32` width, height, channels, then the samples, all
/// little-endian.
pub fn save_f64(path: &Path, img: &Image) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * img.len());
    for d in [img.width, img.height, img.channels] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn load_f64(path: &Path) -> Result<Image> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let bad = |message: &str| Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if buf.len() < 12 {
        return Err(bad("truncated header"));
    }
    let dim = |k: usize| u32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    if buf.len() != 12 + 8 * w * h * c {
        return Err(bad("payload length does not match header"));
    }
    let data = buf[12..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Image::from_data(w, h, c, data)
}

/// `dir/images/NNNN.ext`.
pub fn image_path(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join("images").join(format!("{i:04}.{ext}"))
}

/// Loads view `i` of a dataset-style directory, preferring the exact dump.
pub fn load_view_image(dir: &Path, i: usize) -> Result<Image> {
    let exact = image_path(dir, i, "f64");
    if exact.exists() {
        load_f64(&exact)
    } else {
        load_png(&image_path(dir, i, "png"))
    }
}

/// Writes `images/NNNN.png` and `images/NNNN.f64` for every image.
pub fn save_view_images(dir: &Path, images: &[Image]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    for (i, img) in images.iter().enumerate() {
        save_png(&image_path(dir, i, "png"), img)?;
        save_f64(&image_path(dir, i, "f64"), img)?;
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    if ds.images.len() != ds.cameras.len() {
        return Err(Error::shape("dataset image and camera counts differ"));
    }
    save_view_images(dir, &ds.images)?;
    save_cameras(&dir.join("cameras.json"), &ds.cameras)?;
    if let Some(cloud) = &ds.cloud {
        save_cloud(&dir.join("cloud.json"), cloud)?;
    }
    write_json(&dir.join("meta.json"), &ds.meta)
}

/// Loads a dataset directory. Exact `.f64` dumps are preferred over PNGs.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cameras = load_cameras(&dir.join("cameras.json"))?;
    let mut images = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let img = load_view_image(dir, i)?;
        if img.width != cam.intrinsics.width as usize
            || img.height != cam.intrinsics.height as usize
        {
            return Err(Error::Format {
                path: image_path(dir, i, "png"),
                message: format!(
                    "image is {}x{} but camera {i} is {}x{}",
                    img.width, img.height, cam.intrinsics.width, cam.intrinsics.height
                ),
            });
        }
        images.push(img);
    }
    let cloud_path = dir.join("cloud.json");
    let cloud = if cloud_path.exists() {
        Some(load_cloud(&cloud_path)?)
    } else {
        None
    };
    let meta_path = dir.join("meta.json");
    let meta = if meta_path.exists() {
        read_json(&meta_path)?
    } else {
        DatasetMeta {
            seed: 0,
            config: serde_json::Value::Null,
            metric_extent: None,
        }
    };
    Ok(Dataset {
        images,
        cameras,
        cloud,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::spherical_to_cartesian;

    #[test]
    fn orbit_cameras_respect_ranges() {
        let cfg = OrbitConfig {
            seed: 3,
            ..Default::default()
        };
        let cams = sample_orbit_cameras(&cfg).unwrap();
        assert_eq!(cams.len(), 128);
        for c in &cams {
            let s = cartesian_to_spherical(c.center());
            assert!(s.r >= 1.2 - 1e-12 && s.r <= 1.8 + 1e-12);
            assert!(s.phi.to_degrees() >= 75.0 - 1e-9 && s.phi.to_degrees() <= 90.0 + 1e-9);
            let f = c.intrinsics.fov_x.to_degrees();
            assert!((50.0..=70.0).contains(&f));
        }
        // One elevation and FOV per orbit.
        for orbit in cams.chunks(32) {
            let phi0 = cartesian_to_spherical(orbit[0].center()).phi;
            for c in orbit {
                assert!((cartesian_to_spherical(c.center()).phi - phi0).abs() < 1e-9);
                assert_eq!(c.intrinsics.fov_x, orbit[0].intrinsics.fov_x);
            }
        }
    }

    #[test]
    fn zero_jitter_looks_at_origin_with_even_spacing() {
        let cfg = OrbitConfig {
            orbits: 1,
            views_per_orbit: 8,
            lookat_jitter: [0.0, 0.0],
            azimuth_jitter: false,
            seed: 5,
            ..Default::default()
        };
        let cams = sample_orbit_cameras(&cfg).unwrap();
        for c in &cams {
            let o = c.extrinsics.world_to_camera(&Vec3::zeros());
            assert!(o.x.abs() < 1e-12 && o.y.abs() < 1e-12 && o.z > 0.0);
        }
        let th0 = cartesian_to_spherical(cams[0].center()).theta;
        let th4 = cartesian_to_spherical(cams[4].center()).theta;
        assert!(((th4 - th0).abs() - PI).abs() < 1e-12);
    }

    #[test]
    fn synthetic_cloud_is_seeded_and_centered() {
        let a = make_synthetic_cloud(50, 7, CloudStyle::Blob, 1).unwrap();
        let b = make_synthetic_cloud(50, 7, CloudStyle::Blob, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_position().norm() < 1e-9);
        assert!(a.positions().iter().all(|p| p.norm() < 1.0));
        for n in [1, 2, 7, 40] {
            let s = make_synthetic_cloud(
                n,
                9,
                CloudStyle::Shell {
                    inner: 0.3,
                    outer: 0.45,
                },
                0,
            )
            .unwrap();
            assert!(s.mean_position().norm() < 1e-9);
            if n > 1 {
                for p in s.positions() {
                    let r = p.norm();
                    assert!((0.3 - 1e-12..=0.45 + 1e-12).contains(&r), "{r}");
                }
            }
        }
        assert!(make_synthetic_cloud(0, 1, CloudStyle::Blob, 0).is_err());
    }

    #[test]
    fn perturbation_bounds_hold() {
        let cams = sample_orbit_cameras(&OrbitConfig {
            orbits: 2,
            views_per_orbit: 16,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(perturb_cameras(&cams, 0.0, 0.0, 1).unwrap(), cams);
        let p = perturb_cameras(&cams, 5.0, 0.05, 2).unwrap();
        assert_eq!(p, perturb_cameras(&cams, 5.0, 0.05, 2).unwrap());
        for (a, b) in cams.iter().zip(&p) {
            assert!(
                a.extrinsics
                    .rotation
                    .geodesic_angle(b.extrinsics.rotation)
                    .to_degrees()
                    <= 5.0 + 1e-9
            );
            assert!((a.center() - b.center()).norm() <= 0.05 * a.center().norm() + 1e-12);
            assert_eq!(a.intrinsics, b.intrinsics);
        }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let cloud = make_synthetic_cloud(20, 1, CloudStyle::Blob, 1).unwrap();
        let cams = sample_orbit_cameras(&OrbitConfig {
            orbits: 1,
            views_per_orbit: 3,
            ..Default::default()
        })
        .unwrap();
        let ds = render_dataset(&cloud, &cams, 16, &RenderOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.cameras, ds.cameras);
        assert_eq!(back.images, ds.images);
        assert_eq!(back.cloud, ds.cloud);
        assert_eq!(back.meta, ds.meta);
        for (i, c) in ds.cameras.iter().enumerate() {
            let again = rasterize(&cloud, c, &RenderOptions::default())
                .unwrap()
                .rgba();
            assert_eq!(again, ds.images[i]);
        }
        let png = load_png(&dir.path().join("images/0000.png")).unwrap();
        for (a, b) in png.data.iter().zip(&ds.images[0].data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn empty_inputs() {
        let cloud = make_synthetic_cloud(4, 1, CloudStyle::Blob, 0).unwrap();
        let ds = render_dataset(&cloud, &[], 16, &RenderOptions::default()).unwrap();
        assert!(ds.is_empty());
        let cam = Camera::look_at(
            spherical_to_cartesian(crate::geometry::Spherical::new(1.5, 0.3, 1.4)),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 8),
        );
        let empty = render_dataset(
            &GaussianCloud::default(),
            &[cam],
            8,
            &RenderOptions::default(),
        )
        .unwrap();
        assert!(empty.images[0].data.chunks(4).all(|p| p[3] == 0.0));
    }
}
