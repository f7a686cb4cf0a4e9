//! Image losses, camera and regularization losses, and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compute_bbox, BBox3, Camera, Quaternion, Vec3};
use crate::grad::{CameraGrad, GradientSet, ImageLoss};
use crate::image::Image;
use crate::render::{GaussianCloud, RenderOutput};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.len() as f64)
}

/// d l1 / d a. The subgradient at equality is 0.
pub fn l1_grad(a: &Image, b: &Image) -> Result<Image> {
    a.check_same_shape(b)?;
    let n = a.len() as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = x - y;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Image::from_data(a.width, a.height, a.channels, data)
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

pub fn mse_grad(a: &Image, b: &Image) -> Result<Image> {
    a.check_same_shape(b)?;
    let k = 2.0 / a.len() as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| k * (x - y))
        .collect();
    Image::from_data(a.width, a.height, a.channels, data)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" Gaussian filter of a single-channel plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-sized map back to full size.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                out[y * w + x + i] += kv * v;
            }
        }
    }
    out
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_window();
    let count = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * a.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, a.channels));
    for ch in 0..a.channels {
        let pa = a.channel(ch).data;
        let pb = b.channel(ch).data;
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let n = mu_a.len();
        let mut g_mu = vec![0.0; n];
        let mut g_eaa = vec![0.0; n];
        let mut g_eab = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = ma * ma + mb * mb + c1;
            let b2 = va + vb + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dcov = s * 2.0 / a2;
                let ds_dva = -s / b2;
                g_mu[i] = s * (2.0 * mb / a1 - 2.0 * ma / b1) - ds_dcov * mb - 2.0 * ds_dva * ma;
                g_eaa[i] = ds_dva;
                g_eab[i] = ds_dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = filter_valid_adjoint(&g_mu, w, h, &k);
            let t_aa = filter_valid_adjoint(&g_eaa, w, h, &k);
            let t_ab = filter_valid_adjoint(&g_eab, w, h, &k);
            for p in 0..w * h {
                let v = t_mu[p] + 2.0 * pa[p] * t_aa[p] + pb[p] * t_ab[p];
                g.data[p * a.channels + ch] = v / count;
            }
        }
    }
    Ok((total / count, grad))
}

/// Mean local SSIM over all full 11x11 windows (Gaussian, sigma 1.5) and
/// channels, with `K1 = 0.01`, `K2 = 0.03` and dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `min(|q - q_hat|_1, |q + q_hat|_1)`, invariant to the sign of either input.
pub fn rotation_loss(q: Quaternion, q_hat: Quaternion) -> f64 {
    let a = q.to_array();
    let b = q_hat.to_array();
    let minus: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let plus: f64 = a.iter().zip(&b).map(|(x, y)| (x + y).abs()).sum();
    minus.min(plus)
}

fn fov_pair(c: &Camera) -> [f64; 2] {
    [c.intrinsics.fov_x, c.intrinsics.fov_y]
}

/// Rotation term plus L1 on translation and on the two fields of view.
pub fn camera_loss(cam: &Camera, gt: &Camera) -> f64 {
    let t: f64 = (cam.extrinsics.translation - gt.extrinsics.translation)
        .abs()
        .sum();
    let f: f64 = fov_pair(cam)
        .iter()
        .zip(fov_pair(gt))
        .map(|(a, b)| (a - b).abs())
        .sum();
    rotation_loss(cam.extrinsics.rotation, gt.extrinsics.rotation) + t + f
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`camera_loss`] with respect to `cam`.
pub fn camera_loss_grad(cam: &Camera, gt: &Camera) -> CameraGrad {
    let a = cam.extrinsics.rotation.to_array();
    let b = gt.extrinsics.rotation.to_array();
    let minus: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    let plus: f64 = a.iter().zip(&b).map(|(x, y)| (x + y).abs()).sum();
    let mut rotation = [0.0; 4];
    for k in 0..4 {
        rotation[k] = if minus <= plus {
            sign(a[k] - b[k])
        } else {
            sign(a[k] + b[k])
        };
    }
    let dt = cam.extrinsics.translation - gt.extrinsics.translation;
    let (fa, fb) = (fov_pair(cam), fov_pair(gt));
    CameraGrad {
        rotation,
        translation: [sign(dt.x), sign(dt.y), sign(dt.z)],
        fov: [sign(fa[0] - fb[0]), sign(fa[1] - fb[1])],
    }
}

/// `mean (alpha_i - 1)^2 + mean max_j s_ij` over activated opacities and scales.
pub fn reg_loss(cloud: &GaussianCloud) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("regularizer of an empty cloud".into()));
    }
    let n = cloud.len() as f64;
    let op: f64 = cloud
        .gaussians
        .iter()
        .map(|g| (g.opacity() - 1.0).powi(2))
        .sum();
    let sc: f64 = cloud.gaussians.iter().map(|g| g.scale().max()).sum();
    Ok(op / n + sc / n)
}

/// Gradient of [`reg_loss`] with respect to the raw opacity and scale
/// parameters. Ties in the max pick the first axis.
pub fn reg_grad(cloud: &GaussianCloud) -> GradientSet {
    let mut g = GradientSet::zeros_like(cloud);
    let n = cloud.len() as f64;
    for (gg, src) in g.gaussians.iter_mut().zip(&cloud.gaussians) {
        let a = src.opacity();
        gg.opacity_raw = 2.0 * (a - 1.0) * a * (1.0 - a) / n;
        let s = src.scale();
        let imax = s.imax();
        gg.scale_raw[imax] = s[imax] / n;
    }
    g
}

/// Mean absolute error over the three box extents.
pub fn scale_loss(pred: &BBox3, gt: &BBox3) -> f64 {
    (pred.extent - gt.extent).abs().sum() / 3.0
}

pub fn scale_loss_grad(pred: &BBox3, gt: &BBox3) -> Vec3 {
    (pred.extent - gt.extent).map(sign) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Posed training: image, camera, scale and regularization terms.
    #[serde(rename = "1")]
    Posed,
    /// Unposed training: image terms and regularization only.
    #[serde(rename = "2")]
    Unposed,
    /// Color-only refit against harmonized targets.
    Harmonize,
}

/// Per-term weights. The perceptual (LPIPS) slot exists but is fixed to zero
/// because no perceptual network is available.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub mse: f64,
    pub lpips: f64,
    pub scale: f64,
    pub cam: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_stage(Stage::Posed)
    }
}

impl LossWeights {
    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Posed => Self {
                l1: 1.0,
                ssim: 1.0,
                mse: 0.0,
                lpips: 0.0,
                scale: 1.0,
                cam: 1.0,
                reg: 1.0,
            },
            Stage::Unposed => Self {
                l1: 1.0,
                ssim: 1.0,
                mse: 0.0,
                lpips: 0.0,
                scale: 0.0,
                cam: 0.0,
                reg: 1.0,
            },
            Stage::Harmonize => Self {
                l1: 10.0,
                ssim: 10.0,
                mse: 10.0,
                lpips: 0.0,
                scale: 0.0,
                cam: 0.0,
                reg: 0.0,
            },
        }
    }

    /// Stage 2 never sees camera or scale supervision, whatever the config says.
    pub fn effective(self, stage: Stage) -> Self {
        match stage {
            Stage::Posed => self,
            Stage::Unposed => Self {
                scale: 0.0,
                cam: 0.0,
                ..self
            },
            Stage::Harmonize => Self {
                scale: 0.0,
                cam: 0.0,
                reg: 0.0,
                ..self
            },
        }
    }
}

/// Weighted photometric loss against a target image.
pub struct PhotometricLoss<'a> {
    pub target: &'a Image,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhotometricTerms {
    pub l1: f64,
    /// `1 - SSIM`.
    pub ssim_loss: f64,
    pub mse: f64,
}

impl PhotometricLoss<'_> {
    pub fn terms(&self, rgb: &Image) -> Result<PhotometricTerms> {
        Ok(PhotometricTerms {
            l1: l1_loss(rgb, self.target)?,
            ssim_loss: if self.weights.ssim != 0.0 {
                1.0 - ssim(rgb, self.target)?
            } else {
                0.0
            },
            mse: mse(rgb, self.target)?,
        })
    }

    pub fn weighted(&self, t: &PhotometricTerms) -> f64 {
        self.weights.l1 * t.l1 + self.weights.ssim * t.ssim_loss + self.weights.mse * t.mse
    }

    pub fn value_and_grad(&self, rgb: &Image) -> Result<(PhotometricTerms, Image)> {
        let mut g = Image::new(rgb.width, rgb.height, rgb.channels);
        let mut terms = PhotometricTerms {
            l1: l1_loss(rgb, self.target)?,
            mse: mse(rgb, self.target)?,
            ssim_loss: 0.0,
        };
        if self.weights.l1 != 0.0 {
            g.add_assign_scaled(&l1_grad(rgb, self.target)?, self.weights.l1);
        }
        if self.weights.mse != 0.0 {
            g.add_assign_scaled(&mse_grad(rgb, self.target)?, self.weights.mse);
        }
        if self.weights.ssim != 0.0 {
            let (s, sg) = ssim_with_grad(rgb, self.target)?;
            terms.ssim_loss = 1.0 - s;
            g.add_assign_scaled(&sg, -self.weights.ssim);
        }
        Ok((terms, g))
    }
}

impl ImageLoss for PhotometricLoss<'_> {
    fn value(&self, out: &RenderOutput) -> Result<f64> {
        Ok(self.weighted(&self.terms(&out.rgb)?))
    }

    fn gradient(&self, out: &RenderOutput) -> Result<Image> {
        Ok(self.value_and_grad(&out.rgb)?.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_loss: f64,
    pub mse: f64,
    /// Always `None`: no perceptual network is shipped.
    pub lpips: Option<f64>,
    pub cam: f64,
    pub scale: f64,
    pub reg: f64,
    pub total: f64,
    pub weights: LossWeights,
    /// Weighted image (and, in stage 1, camera) loss of each view.
    pub per_view: Vec<f64>,
}

impl LossBreakdown {
    /// Weighted components in a fixed order; they sum to `total`.
    pub fn weighted_terms(&self) -> [f64; 6] {
        let w = &self.weights;
        [
            w.l1 * self.l1,
            w.ssim * self.ssim_loss,
            w.mse * self.mse,
            w.cam * self.cam,
            w.scale * self.scale,
            w.reg * self.reg,
        ]
    }
}

/// Ground truth needed by the posed stage.
#[derive(Debug, Clone, Copy)]
pub struct StageTruth<'a> {
    pub cameras: Option<&'a [Camera]>,
    pub pred_box: Option<&'a BBox3>,
    pub gt_box: Option<&'a BBox3>,
}

/// Combined loss of one training step. Image and camera terms are averaged
/// over views.
pub fn stage_loss(
    stage: Stage,
    weights: LossWeights,
    views: &[(&Image, &Image)],
    cams: &[Camera],
    cloud: &GaussianCloud,
    truth: StageTruth<'_>,
) -> Result<LossBreakdown> {
    if views.is_empty() {
        return Err(Error::EmptyInput(
            "stage loss needs at least one view".into(),
        ));
    }
    if cams.len() != views.len() {
        return Err(Error::shape(format!(
            "{} views but {} cameras",
            views.len(),
            cams.len()
        )));
    }
    let w = weights.effective(stage);
    let n = views.len() as f64;
    let (mut l1, mut ssim_l, mut m, mut cam_l, mut scale_l) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut per_view = Vec::with_capacity(views.len());
    let gt_cams = if stage == Stage::Posed {
        let gt = truth.cameras.ok_or_else(|| {
            Error::MissingGroundTruth("stage 1 needs ground-truth cameras".into())
        })?;
        if gt.len() != cams.len() {
            return Err(Error::shape(
                "ground-truth camera count differs from view count",
            ));
        }
        Some(gt)
    } else {
        None
    };
    for (i, (render, target)) in views.iter().enumerate() {
        let photo = PhotometricLoss { target, weights: w };
        let t = photo.terms(render)?;
        l1 += t.l1 / n;
        ssim_l += t.ssim_loss / n;
        m += t.mse / n;
        let mut v = photo.weighted(&t);
        if let Some(gt) = gt_cams {
            let c = camera_loss(&cams[i], &gt[i]);
            cam_l += c / n;
            v += w.cam * c;
        }
        per_view.push(v);
    }
    if stage == Stage::Posed {
        let (pred, gt) = match (truth.pred_box, truth.gt_box) {
            (Some(p), Some(g)) => (p, g),
            _ => {
                return Err(Error::MissingGroundTruth(
                    "stage 1 needs predicted and ground-truth boxes".into(),
                ))
            }
        };
        scale_l = scale_loss(pred, gt);
    }
    let reg = if w.reg != 0.0 { reg_loss(cloud)? } else { 0.0 };
    let mut out = LossBreakdown {
        l1,
        ssim_loss: ssim_l,
        mse: m,
        lpips: None,
        cam: cam_l,
        scale: scale_l,
        reg,
        total: 0.0,
        weights: w,
        per_view,
    };
    out.total = out.weighted_terms().iter().sum();
    Ok(out)
}

/// Static 3-d tree for exact nearest-neighbor distances.
pub struct KdTree<'a> {
    points: &'a [Vec3],
    nodes: Vec<KdNode>,
    root: usize,
}

enum KdNode {
    Leaf(Vec<usize>),
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

const KD_LEAF: usize = 8;

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
            root: 0,
        };
        let idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(idx);
        tree
    }

    fn build(&mut self, mut idx: Vec<usize>) -> usize {
        if idx.len() <= KD_LEAF {
            self.nodes.push(KdNode::Leaf(idx));
            return self.nodes.len() - 1;
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in &idx {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        idx.sort_by(|a, b| self.points[*a][axis].total_cmp(&self.points[*b][axis]));
        let mid = idx.len() / 2;
        let value = self.points[idx[mid]][axis];
        let right_idx = idx.split_off(mid);
        let left = self.build(idx);
        let right = self.build(right_idx);
        self.nodes.push(KdNode::Split {
            axis,
            value,
            left,
            right,
        });
        self.nodes.len() - 1
    }

    /// Distance from `q` to its nearest point.
    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(self.root, q, &mut best);
        best.sqrt()
    }

    fn search(&self, node: usize, q: &Vec3, best_sq: &mut f64) {
        match &self.nodes[node] {
            KdNode::Leaf(idx) => {
                for &i in idx {
                    let d = (self.points[i] - q).norm_squared();
                    if d < *best_sq {
                        *best_sq = d;
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 {
                    (*left, *right)
                } else {
                    (*right, *left)
                };
                self.search(near, q, best_sq);
                if diff * diff <= *best_sq {
                    self.search(far, q, best_sq);
                }
            }
        }
    }
}

fn nn_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter().map(|p| tree.nearest_distance(p)).collect()
}

/// Bidirectional mean nearest-neighbor distance (not squared), averaged
/// over the two directions.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput(
            "chamfer distance of an empty point set".into(),
        ));
    }
    let ab: f64 = nn_distances(a, b).iter().sum::<f64>() / a.len() as f64;
    let ba: f64 = nn_distances(b, a).iter().sum::<f64>() / b.len() as f64;
    Ok(0.5 * (ab + ba))
}

/// Harmonic mean of precision (share of `a` within `tau` of `b`) and recall
/// (share of `b` within `tau` of `a`).
pub fn f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("f-score of an empty point set".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!(
            "f-score threshold must be positive, got {tau}"
        )));
    }
    let within = |d: Vec<f64>| d.iter().filter(|v| **v <= tau).count() as f64 / d.len() as f64;
    let p = within(nn_distances(a, b));
    let r = within(nn_distances(b, a));
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

/// Reporting conventions for geometry metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricScale {
    /// Normalized scene units; CD reported x10^3, F-score at 0.01.
    Normalized,
    /// Meters; CD reported as is, F-score at 0.05 m.
    Metric,
}

impl MetricScale {
    pub fn cd_multiplier(self) -> f64 {
        match self {
            MetricScale::Normalized => 1e3,
            MetricScale::Metric => 1.0,
        }
    }

    pub fn f_score_threshold(self) -> f64 {
        match self {
            MetricScale::Normalized => 0.01,
            MetricScale::Metric => 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryMetrics {
    pub scale: MetricScale,
    pub chamfer: f64,
    pub f_score: f64,
    pub f_score_threshold: f64,
}

/// Stretches normalized points so their bounding box matches `extent`
/// (meters). Degenerate axes are left unscaled.
pub fn to_metric(points: &[Vec3], extent: &BBox3) -> Result<Vec<Vec3>> {
    let b = compute_bbox(points)?;
    let factor = Vec3::from_fn(|k, _| {
        if b.extent[k] > 0.0 {
            extent.extent[k] / b.extent[k]
        } else {
            1.0
        }
    });
    Ok(points.iter().map(|p| p.component_mul(&factor)).collect())
}

/// Chamfer distance and F-score under a reporting convention. Points must
/// already be in the convention's units.
pub fn geometry_metrics(pred: &[Vec3], gt: &[Vec3], scale: MetricScale) -> Result<GeometryMetrics> {
    let tau = scale.f_score_threshold();
    Ok(GeometryMetrics {
        scale,
        chamfer: chamfer_distance(pred, gt)? * scale.cd_multiplier(),
        f_score: f_score(pred, gt, tau)?,
        f_score_threshold: tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
        Image::from_data(w, h, 3, data).unwrap()
    }

    #[test]
    fn l1_cases() {
        let a = random_image(5, 4, 1);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let z = Image::filled(4, 4, 3, 0.0);
        let o = Image::filled(4, 4, 3, 1.0);
        assert_eq!(l1_loss(&z, &o).unwrap(), 1.0);
        let b = random_image(5, 4, 2);
        let mut acc = 0.0;
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    acc += (a.get(x, y, c) - b.get(x, y, c)).abs();
                }
            }
        }
        assert!((l1_loss(&a, &b).unwrap() - acc / 60.0).abs() < 1e-15);
        assert!(l1_loss(&a, &z).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(4, 4, 3, 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, 3, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, 3, 0.5 + 0.1 / 2f64.sqrt());
        let gain = psnr(&a, &c).unwrap() - psnr(&a, &b).unwrap();
        assert!((gain - 10.0 * 2f64.log10()).abs() < 1e-9);
    }

    // Direct sliding-window SSIM: every window statistic computed from scratch.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let r = 5i64;
        let mut w2 = vec![vec![0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in w2.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..a.channels {
            for cy in r..a.height as i64 - r {
                for cx in r..a.width as i64 - r {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let w = w2[(dy + r) as usize][(dx + r) as usize] / s;
                            let x = a.get((cx + dx) as usize, (cy + dy) as usize, c);
                            let y = b.get((cx + dx) as usize, (cy + dy) as usize, c);
                            ma += w * x;
                            mb += w * y;
                            saa += w * x * x;
                            sbb += w * y * y;
                            sab += w * x * y;
                        }
                    }
                    let va = saa - ma * ma;
                    let vb = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = random_image(16, 13, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_constants_is_closed_form() {
        let (x, y) = (0.3, 0.7);
        let a = Image::filled(12, 12, 3, x);
        let b = Image::filled(12, 12, 3, y);
        let c1 = 1e-4;
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_window_oracle_and_is_bounded() {
        for seed in 0..4 {
            let a = random_image(17, 14, seed);
            let b = random_image(17, 14, seed + 100);
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_oracle(&a, &b)).abs() < 1e-12);
            assert!(s < 1.0);
        }
        assert!(ssim(&random_image(10, 20, 1), &random_image(10, 20, 2)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let a = random_image(13, 12, 7);
        let b = random_image(13, 12, 8);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for idx in [0usize, 17, 100, 233, 400, 13 * 12 * 3 - 1] {
            let mut p = a.clone();
            p.data[idx] += h;
            let mut m = a.clone();
            m.data[idx] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            assert!(
                (fd - g.data[idx]).abs() < 1e-8,
                "{idx}: {fd} vs {}",
                g.data[idx]
            );
        }
    }

    #[test]
    fn rotation_loss_cases() {
        let q = Quaternion::new(0.5, -0.5, 0.5, 0.5);
        assert_eq!(rotation_loss(q, q), 0.0);
        assert_eq!(rotation_loss(q, -q), 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random())
                .normalized();
            let b = Quaternion::new(rng.random(), rng.random(), rng.random(), rng.random())
                .normalized();
            let minus =
                (a.w - b.w).abs() + (a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs();
            let plus =
                (a.w + b.w).abs() + (a.x + b.x).abs() + (a.y + b.y).abs() + (a.z + b.z).abs();
            assert_eq!(rotation_loss(a, b), minus.min(plus));
            assert_eq!(rotation_loss(a, b), rotation_loss(b, a));
            assert_eq!(rotation_loss(a, b), rotation_loss(a, -b));
        }
    }

    #[test]
    fn camera_loss_cases() {
        use crate::geometry::CameraIntrinsics;
        let cam = Camera::look_at(
            Vec3::new(1.4, 0.2, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 32),
        );
        assert_eq!(camera_loss(&cam, &cam), 0.0);
        let mut moved = cam;
        moved.extrinsics.translation.x += 0.1;
        assert!((camera_loss(&moved, &cam) - 0.1).abs() < 1e-15);
        let mut other = Camera::look_at(
            Vec3::new(-0.3, 1.5, 0.1),
            Vec3::zeros(),
            CameraIntrinsics::square(0.9, 32),
        );
        other.intrinsics.fov_y = 1.2;
        let expect = rotation_loss(other.extrinsics.rotation, cam.extrinsics.rotation)
            + (other.extrinsics.translation - cam.extrinsics.translation)
                .abs()
                .sum()
            + 0.1
            + 0.2;
        assert!((camera_loss(&other, &cam) - expect).abs() < 1e-14);
    }

    #[test]
    fn reg_loss_one_gaussian() {
        use crate::geometry::Spherical;
        use crate::render::{opacity_inverse, scale_inverse, Gaussian};
        let g = Gaussian {
            position: Spherical::new(0.1, 0.0, 1.0),
            scale_raw: Vec3::new(
                scale_inverse(0.01),
                scale_inverse(0.02),
                scale_inverse(0.03),
            ),
            rotation: Quaternion::IDENTITY,
            opacity_raw: opacity_inverse(0.5),
            sh: vec![Vec3::zeros()],
        };
        let cloud = GaussianCloud::new(vec![g]);
        assert!((reg_loss(&cloud).unwrap() - (0.25 + 0.03)).abs() < 1e-14);
        assert!(reg_loss(&GaussianCloud::default()).is_err());
    }

    #[test]
    fn reg_grad_matches_finite_differences() {
        use crate::geometry::Spherical;
        use crate::render::Gaussian;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let cloud = GaussianCloud::new(
            (0..5)
                .map(|_| Gaussian {
                    position: Spherical::new(0.3, 0.1, 1.0),
                    scale_raw: Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    rotation: Quaternion::IDENTITY,
                    opacity_raw: rng.random_range(-2.0..3.0),
                    sh: vec![Vec3::zeros()],
                })
                .collect(),
        );
        let g = reg_grad(&cloud);
        let h = 1e-6;
        for i in 0..5 {
            let mut p = cloud.clone();
            p.gaussians[i].opacity_raw += h;
            let mut m = cloud.clone();
            m.gaussians[i].opacity_raw -= h;
            let fd = (reg_loss(&p).unwrap() - reg_loss(&m).unwrap()) / (2.0 * h);
            assert!((fd - g.gaussians[i].opacity_raw).abs() < 1e-9);
            for k in 0..3 {
                let mut p = cloud.clone();
                p.gaussians[i].scale_raw[k] += h;
                let mut m = cloud.clone();
                m.gaussians[i].scale_raw[k] -= h;
                let fd = (reg_loss(&p).unwrap() - reg_loss(&m).unwrap()) / (2.0 * h);
                assert!((fd - g.gaussians[i].scale_raw[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn scale_loss_cases() {
        let a = BBox3 {
            extent: Vec3::new(4.5, 1.8, 1.5),
        };
        let b = BBox3 {
            extent: Vec3::new(4.2, 1.8, 1.5),
        };
        assert_eq!(scale_loss(&a, &a), 0.0);
        assert!((scale_loss(&a, &b) - 0.1).abs() < 1e-12);
        assert_eq!(scale_loss(&a, &b), scale_loss(&b, &a));
    }

    fn brute_nn(p: &Vec3, set: &[Vec3]) -> f64 {
        set.iter()
            .map(|q| (p - q).norm())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let tree = KdTree::new(&pts);
        for _ in 0..200 {
            let q = Vec3::new(rng.random(), rng.random(), rng.random()) * 1.2;
            assert_eq!(tree.nearest_distance(&q), brute_nn(&q, &pts));
        }
    }

    #[test]
    fn chamfer_and_fscore_cases() {
        let a = vec![Vec3::zeros()];
        let b = vec![Vec3::new(0.3, 0.0, 0.0)];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!((chamfer_distance(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(f_score(&a, &a, 0.01).unwrap(), 1.0);
        let far = vec![Vec3::new(10.0, 0.0, 0.0)];
        assert_eq!(f_score(&a, &far, 0.01).unwrap(), 0.0);
        assert!(chamfer_distance(&[], &a).is_err());
        assert!(f_score(&a, &a, 0.0).is_err());
    }

    #[test]
    fn stage_two_ignores_camera_error() {
        use crate::geometry::CameraIntrinsics;
        let img = random_image(12, 12, 5);
        let tgt = random_image(12, 12, 6);
        let cam = Camera::look_at(
            Vec3::new(1.4, 0.2, 0.3),
            Vec3::zeros(),
            CameraIntrinsics::square(1.0, 12),
        );
        let mut wrong = cam;
        wrong.extrinsics.translation.y += 3.0;
        let cloud =
            crate::synth::make_synthetic_cloud(4, 1, crate::synth::CloudStyle::Blob, 0).unwrap();
        let truth = StageTruth {
            cameras: Some(std::slice::from_ref(&wrong)),
            pred_box: None,
            gt_box: None,
        };
        let views = [(&img, &tgt)];
        let a = stage_loss(
            Stage::Unposed,
            LossWeights::for_stage(Stage::Unposed),
            &views,
            &[cam],
            &cloud,
            truth,
        )
        .unwrap();
        let b = stage_loss(
            Stage::Unposed,
            LossWeights::for_stage(Stage::Posed),
            &views,
            &[cam],
            &cloud,
            StageTruth {
                cameras: None,
                pred_box: None,
                gt_box: None,
            },
        )
        .unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.cam, 0.0);
        let err = stage_loss(
            Stage::Posed,
            LossWeights::default(),
            &views,
            &[cam],
            &cloud,
            StageTruth {
                cameras: None,
                pred_box: None,
                gt_box: None,
            },
        );
        assert!(matches!(err, Err(Error::MissingGroundTruth(_))));
    }
}
