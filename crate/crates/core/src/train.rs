//! Optimization: learning-rate schedule, Adam, view-count sampling, 3-sigma
//! gradient filtering, progressive spherical optimization, and the two
//! fitting loops (`fit_scene` and the color-only `harmonize`).

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_to_spherical, compute_bbox, quat_to_rotmat, spherical_to_cartesian, BBox3, Camera,
    Quaternion, Vec3,
};
use crate::grad::{backward_render, GradientSet};
use crate::image::Image;
use crate::loss::{
    camera_loss, psnr, reg_grad, reg_loss, scale_loss, scale_loss_grad, LossWeights,
    PhotometricLoss, PhotometricTerms, Stage,
};
use crate::params::{
    camera_from_slice, camera_to_vec, cloud_from_vec, cloud_to_vec, gaussian_param_count,
    CAMERA_PARAMS,
};
use crate::render::{
    opacity_activation, opacity_inverse, rasterize, scale_activation, scale_inverse, Gaussian,
    GaussianCloud, RenderOptions,
};
use crate::sh::{dc_from_rgb, sh_len};

pub const DEFAULT_BASE_LR: f64 = 0.00016;
const WARMUP_START: f64 = 0.1;
const DECAY_END: f64 = 0.01;
pub const FOV_MIN_DEG: f64 = 10.0;
pub const FOV_MAX_DEG: f64 = 170.0;
/// Token grid size and Gaussians decoded per token.
pub const TOKEN_COUNT: usize = 4096;
pub const GAUSSIANS_PER_TOKEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// `lr_at(step) / base_lr`.
    pub fn factor(&self, step: usize) -> f64 {
        let s = step.min(self.total_steps);
        let w = self.warmup_steps;
        if s < w {
            return WARMUP_START + (1.0 - WARMUP_START) * s as f64 / w as f64;
        }
        if self.total_steps == w {
            return 1.0;
        }
        let p = (s - w) as f64 / (self.total_steps - w) as f64;
        DECAY_END + 0.5 * (1.0 - DECAY_END) * (1.0 + (PI * p).cos())
    }
}

/// Linear ramp from `0.1 lr` to `lr` over the warmup, then cosine decay to
/// `0.01 lr` at `total_steps`. Steps past the end are clamped.
pub fn lr_at(sched: &Schedule, step: usize) -> f64 {
    sched.base_lr * sched.factor(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub base_lr: f64,
}

impl OptimState {
    pub fn new(len: usize, base_lr: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            base_lr,
        }
    }
}

/// Per-element learning-rate multipliers and trainable flags, plus the
/// offsets of quaternion blocks (renormalized after each step) and of field
/// of view entries (clamped to `(10, 170)` degrees).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamLayout {
    pub lr_scale: Vec<f64>,
    pub trainable: Vec<bool>,
    pub quaternions: Vec<usize>,
    pub fovs: Vec<usize>,
}

impl ParamLayout {
    pub fn uniform(len: usize) -> Self {
        Self {
            lr_scale: vec![1.0; len],
            trainable: vec![true; len],
            ..Default::default()
        }
    }
}

/// One bias-corrected Adam update. Frozen entries keep their value and
/// moments; non-finite gradients on trainable entries are rejected before
/// anything changes.
pub fn optimizer_step(
    state: &mut OptimState,
    cfg: &AdamConfig,
    layout: &ParamLayout,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n
        || state.m.len() != n
        || layout.lr_scale.len() != n
        || layout.trainable.len() != n
    {
        return Err(Error::shape(format!(
            "optimizer sizes differ: params {n}, grads {}, moments {}, layout {}",
            grads.len(),
            state.m.len(),
            layout.lr_scale.len()
        )));
    }
    if let Some(i) = (0..n).find(|&i| layout.trainable[i] && !grads[i].is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}",
            grads[i]
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        if !layout.trainable[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let step_lr = lr * layout.lr_scale[i];
        if cfg.weight_decay != 0.0 {
            params[i] -= step_lr * cfg.weight_decay * params[i];
        }
        params[i] -= step_lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    for &o in &layout.quaternions {
        if layout.trainable[o..o + 4].iter().any(|b| *b) {
            let q = Quaternion::new(params[o], params[o + 1], params[o + 2], params[o + 3])
                .normalized();
            params[o..o + 4].copy_from_slice(&q.to_array());
        }
    }
    let (lo, hi) = (FOV_MIN_DEG.to_radians(), FOV_MAX_DEG.to_radians());
    for &o in &layout.fovs {
        params[o] = params[o].clamp(lo, hi);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewSamplerConfig {
    /// Largest number of views per step, `V`.
    pub max_views: usize,
    /// Decay rate of `pi_v = exp(-lambda (v - 1))`.
    pub lambda: f64,
}

impl Default for ViewSamplerConfig {
    fn default() -> Self {
        Self {
            max_views: 4,
            lambda: 0.5,
        }
    }
}

/// Normalized `exp(-lambda (v - 1))` for `v = 1..=V`.
pub fn view_count_probabilities(cfg: &ViewSamplerConfig) -> Result<Vec<f64>> {
    if cfg.max_views == 0 {
        return Err(Error::invalid("view sampler needs max_views >= 1"));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::invalid(format!(
            "view sampler lambda must be >= 0, got {}",
            cfg.lambda
        )));
    }
    let w: Vec<f64> = (0..cfg.max_views)
        .map(|k| (-cfg.lambda * k as f64).exp())
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.iter().map(|x| x / s).collect())
}

/// Draws a view count in `1..=V` from [`view_count_probabilities`].
pub fn sample_view_count(cfg: &ViewSamplerConfig, rng: &mut impl Rng) -> Result<usize> {
    let p = view_count_probabilities(cfg)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return Ok(k + 1);
        }
    }
    Ok(p.len())
}

/// Keeps `L_i` with `mean - 3 sigma < L_i < mean + 3 sigma`, using the
/// population standard deviation of the window. A window with `sigma = 0`
/// keeps everything.
pub fn gradient_filter_mask(window: &[f64]) -> Result<Vec<bool>> {
    if window.is_empty() {
        return Err(Error::EmptyInput("filter window is empty".into()));
    }
    if let Some(v) = window.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("filter window holds {v}")));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let sigma = (window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if sigma == 0.0 {
        return Ok(vec![true; window.len()]);
    }
    let (lo, hi) = (mean - 3.0 * sigma, mean + 3.0 * sigma);
    Ok(window.iter().map(|v| lo < *v && *v < hi).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterSignal {
    /// Per-view loss values.
    Loss,
    /// Per-view gradient norms.
    GradNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub enabled: bool,
    pub signal: FilterSignal,
    /// Number of recent per-view values the statistics are taken over.
    pub window: usize,
    /// Also drop a filtered view's gradient on its own camera. Off by
    /// default: that gradient touches nothing shared, and masking it stalls
    /// exactly the cameras that are furthest off.
    pub cameras: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            signal: FilterSignal::Loss,
            window: 32,
            cameras: false,
        }
    }
}

/// Sliding window of recent per-view values.
#[derive(Debug, Clone)]
pub struct FilterWindow {
    values: VecDeque<f64>,
    capacity: usize,
}

impl FilterWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            values: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    /// Appends a batch and returns the mask of that batch against the
    /// updated window.
    pub fn push_batch(&mut self, batch: &[f64]) -> Result<Vec<bool>> {
        let cap = self.capacity.max(batch.len());
        for v in batch {
            self.values.push_back(*v);
        }
        while self.values.len() > cap {
            self.values.pop_front();
        }
        let mask = gradient_filter_mask(&self.values())?;
        Ok(mask[mask.len() - batch.len()..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhasePlan {
    /// Steps before this one train only the radial coordinate.
    pub radial_only_steps: usize,
}

impl Default for PhasePlan {
    fn default() -> Self {
        Self {
            radial_only_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphericalMask {
    pub r: bool,
    pub theta: bool,
    pub phi: bool,
}

pub fn progressive_mask(plan: &PhasePlan, step: usize) -> SphericalMask {
    let angles = step >= plan.radial_only_steps;
    SphericalMask {
        r: true,
        theta: angles,
        phi: angles,
    }
}

/// Learning-rate multipliers per parameter group, relative to the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrMultipliers {
    pub position_r: f64,
    pub position_angles: f64,
    pub scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub sh: f64,
    pub camera_rotation: f64,
    pub camera_translation: f64,
    pub camera_fov: f64,
    pub extent: f64,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            position_r: 30.0,
            position_angles: 60.0,
            scale: 60.0,
            rotation: 60.0,
            opacity: 200.0,
            sh: 100.0,
            camera_rotation: 10.0,
            camera_translation: 10.0,
            camera_fov: 0.5,
            extent: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub lr_mult: LrMultipliers,
    pub adam: AdamConfig,
    pub sampler: ViewSamplerConfig,
    pub filter: FilterConfig,
    pub phases: PhasePlan,
    pub weights: LossWeights,
    pub optimize_geometry: bool,
    pub optimize_fov: bool,
    /// Keep the mean Gaussian position at the origin once angles train.
    pub recenter: bool,
    /// Use every view each step and halve the learning rate (rolling back
    /// the step) whenever the loss increases.
    pub safeguard: bool,
    pub seed: u64,
    /// Set in code; config files carry render options separately.
    #[serde(skip)]
    pub render: RenderOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Posed,
            steps: 500,
            base_lr: DEFAULT_BASE_LR,
            warmup_steps: 50,
            lr_mult: LrMultipliers::default(),
            adam: AdamConfig::default(),
            sampler: ViewSamplerConfig::default(),
            filter: FilterConfig::default(),
            phases: PhasePlan::default(),
            weights: LossWeights::default(),
            optimize_geometry: true,
            optimize_fov: true,
            recenter: true,
            safeguard: false,
            seed: 0,
            render: RenderOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Harmonize {
            return Err(Error::invalid(
                "fit_scene runs stage 1 or 2; use harmonize for color refits",
            ));
        }
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps.max(self.warmup_steps),
        }
        .validate()?;
        view_count_probabilities(&self.sampler)?;
        if self.filter.window == 0 {
            return Err(Error::invalid("filter window must hold at least one value"));
        }
        Ok(())
    }
}

/// Images to fit, with initial cameras and optional ground truth.
#[derive(Debug, Clone, Copy)]
pub struct FitProblem<'a> {
    /// RGB targets, one per camera.
    pub targets: &'a [Image],
    /// Stage 1: the (fixed) cameras. Stage 2: the initial guesses.
    pub cameras: &'a [Camera],
    pub gt_cameras: Option<&'a [Camera]>,
    pub gt_extent: Option<BBox3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub views: Vec<usize>,
    pub per_view: Vec<f64>,
    pub mask: Vec<bool>,
    pub l1: f64,
    pub ssim_loss: f64,
    pub mse: f64,
    pub cam: f64,
    pub scale: f64,
    pub reg: f64,
    pub total: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FitStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
    /// Predicted metric box (stage 1 only).
    pub extent: Option<BBox3>,
    pub history: Vec<StepRecord>,
    pub status: FitStatus,
}

struct ViewEval {
    terms: PhotometricTerms,
    value: f64,
    psnr: f64,
    grads: GradientSet,
}

fn eval_view(
    cloud: &GaussianCloud,
    cam: &Camera,
    target: &Image,
    weights: LossWeights,
    opts: &RenderOptions,
) -> Result<ViewEval> {
    let out = rasterize(cloud, cam, opts)?;
    let photo = PhotometricLoss { target, weights };
    let (terms, d_rgb) = photo.value_and_grad(&out.rgb)?;
    let grads = backward_render(cloud, cam, &out, &d_rgb, opts)?;
    Ok(ViewEval {
        value: photo.weighted(&terms),
        psnr: psnr(&out.rgb, target)?,
        terms,
        grads,
    })
}

/// Flat parameter vector `[cloud | cameras | extent]` with its layout.
struct Packing {
    cloud_len: usize,
    n_cams: usize,
}

impl Packing {
    fn cam_offset(&self, i: usize) -> usize {
        self.cloud_len + i * CAMERA_PARAMS
    }

    fn extent_offset(&self) -> usize {
        self.cloud_len + self.n_cams * CAMERA_PARAMS
    }

    fn len(&self) -> usize {
        self.extent_offset() + 3
    }
}

fn build_layout(
    cloud: &GaussianCloud,
    pk: &Packing,
    cfg: &TrainConfig,
    mask: SphericalMask,
) -> ParamLayout {
    let mut lay = ParamLayout {
        lr_scale: vec![0.0; pk.len()],
        trainable: vec![false; pk.len()],
        quaternions: Vec::new(),
        fovs: Vec::new(),
    };
    let m = &cfg.lr_mult;
    let mut o = 0;
    for g in &cloud.gaussians {
        let k = gaussian_param_count(g);
        let scales = [
            (0, 1, m.position_r, mask.r),
            (1, 1, m.position_angles, mask.theta),
            (2, 1, m.position_angles, mask.phi),
            (3, 3, m.scale, true),
            (6, 4, m.rotation, true),
            (10, 1, m.opacity, true),
            (11, k - 11, m.sh, true),
        ];
        for (start, len, lr, on) in scales {
            for j in o + start..o + start + len {
                lay.lr_scale[j] = lr;
                lay.trainable[j] = on && cfg.optimize_geometry;
            }
        }
        lay.quaternions.push(o + 6);
        o += k;
    }
    let cams_free = cfg.stage == Stage::Unposed;
    for i in 0..pk.n_cams {
        let c = pk.cam_offset(i);
        for j in 0..CAMERA_PARAMS {
            let (lr, on) = match j {
                0..=3 => (m.camera_rotation, cams_free),
                4..=6 => (m.camera_translation, cams_free),
                _ => (m.camera_fov, cams_free && cfg.optimize_fov),
            };
            lay.lr_scale[c + j] = lr;
            lay.trainable[c + j] = on;
        }
        lay.quaternions.push(c);
        lay.fovs.extend([c + 7, c + 8]);
    }
    let e = pk.extent_offset();
    for j in e..e + 3 {
        lay.lr_scale[j] = m.extent;
        lay.trainable[j] = cfg.stage == Stage::Posed;
    }
    lay
}

fn unpack(params: &[f64], pk: &Packing, cloud: &mut GaussianCloud, cams: &mut [Camera]) -> Vec3 {
    cloud_from_vec(cloud, &params[..pk.cloud_len]);
    for (i, c) in cams.iter_mut().enumerate() {
        let o = pk.cam_offset(i);
        camera_from_slice(c, &params[o..o + CAMERA_PARAMS]);
    }
    let e = pk.extent_offset();
    Vec3::new(params[e], params[e + 1], params[e + 2])
}

/// Moves the cloud so its mean position is the origin. When the cameras are
/// free they move with it, which leaves every render unchanged.
pub fn recenter(cloud: &mut GaussianCloud, cams: Option<&mut [Camera]>) -> Vec3 {
    let m = cloud.mean_position();
    for g in cloud.gaussians.iter_mut() {
        g.position = cartesian_to_spherical(spherical_to_cartesian(g.position) - m);
    }
    if let Some(cams) = cams {
        for c in cams.iter_mut() {
            let r = quat_to_rotmat(c.extrinsics.rotation);
            c.extrinsics.translation += r * m;
        }
    }
    m
}

/// Joint fit of Gaussians (and, in stage 2, cameras) to posed or unposed
/// images. Each step samples a view count, renders the chosen views,
/// filters per-view contributions, masks by phase, takes an Adam step and
/// re-centers the object.
pub fn fit_scene(
    init: &GaussianCloud,
    problem: &FitProblem<'_>,
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    init.validate()?;
    let n_views = problem.targets.len();
    if n_views == 0 {
        return Err(Error::EmptyInput(
            "fit_scene needs at least one image".into(),
        ));
    }
    if problem.cameras.len() != n_views {
        return Err(Error::shape(format!(
            "{n_views} images but {} cameras",
            problem.cameras.len()
        )));
    }
    if init.is_empty() {
        return Err(Error::EmptyInput(
            "fit_scene needs at least one Gaussian".into(),
        ));
    }
    for (i, (t, c)) in problem.targets.iter().zip(problem.cameras).enumerate() {
        c.intrinsics.validate()?;
        if t.channels != 3
            || t.width != c.intrinsics.width as usize
            || t.height != c.intrinsics.height as usize
        {
            return Err(Error::shape(format!(
                "target {i} does not match its camera or is not RGB"
            )));
        }
    }
    let weights = cfg.weights.effective(cfg.stage);
    let (gt_cams, gt_extent) = match cfg.stage {
        Stage::Posed => {
            let cams = problem.gt_cameras.ok_or_else(|| {
                Error::MissingGroundTruth("stage 1 needs ground-truth cameras".into())
            })?;
            let ext = problem.gt_extent.ok_or_else(|| {
                Error::MissingGroundTruth("stage 1 needs the ground-truth box".into())
            })?;
            if cams.len() != n_views {
                return Err(Error::shape(
                    "ground-truth camera count differs from image count",
                ));
            }
            (Some(cams), Some(ext))
        }
        _ => (None, None),
    };

    let mut cloud = init.clone();
    let mut cams = problem.cameras.to_vec();
    let init_extent = match init.metric_extent {
        Some(b) => b.extent,
        None => compute_bbox(&init.positions())?.extent,
    };
    let pk = Packing {
        cloud_len: cloud_to_vec(init).len(),
        n_cams: n_views,
    };
    let mut params = cloud_to_vec(init);
    for c in &cams {
        params.extend_from_slice(&camera_to_vec(c));
    }
    params.extend_from_slice(init_extent.as_slice());

    let sched = cfg.schedule();
    let mut opt = OptimState::new(pk.len(), cfg.base_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut window = FilterWindow::new(cfg.filter.window);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut status = FitStatus::Completed;
    let mut lr_factor = 1.0;
    // (params, optimizer, gradient, record) at the last accepted point.
    let mut snapshot: Option<(Vec<f64>, OptimState, Vec<f64>, StepRecord)> = None;
    let mut extent = init_extent;

    for step in 0..cfg.steps {
        let views: Vec<usize> = if cfg.safeguard {
            (0..n_views).collect()
        } else {
            let sc = ViewSamplerConfig {
                max_views: cfg.sampler.max_views.min(n_views),
                lambda: cfg.sampler.lambda,
            };
            let v = sample_view_count(&sc, &mut rng)?;
            let mut idx = sample(&mut rng, n_views, v).into_vec();
            idx.sort_unstable();
            idx
        };
        let evals = views
            .par_iter()
            .map(|&i| eval_view(&cloud, &cams[i], &problem.targets[i], weights, &cfg.render))
            .collect::<Result<Vec<_>>>()?;

        let nv = views.len() as f64;
        let mut rec = StepRecord {
            step,
            lr: 0.0,
            views: views.clone(),
            per_view: Vec::with_capacity(views.len()),
            mask: Vec::new(),
            l1: 0.0,
            ssim_loss: 0.0,
            mse: 0.0,
            cam: 0.0,
            scale: 0.0,
            reg: 0.0,
            total: 0.0,
            psnr: 0.0,
        };
        for (e, &i) in evals.iter().zip(&views) {
            rec.l1 += e.terms.l1 / nv;
            rec.ssim_loss += e.terms.ssim_loss / nv;
            rec.mse += e.terms.mse / nv;
            rec.psnr += e.psnr / nv;
            let mut v = e.value;
            if let Some(gt) = gt_cams {
                let c = camera_loss(&cams[i], &gt[i]);
                rec.cam += c / nv;
                v += weights.cam * c;
            }
            rec.per_view.push(v);
        }
        if let Some(gt) = gt_extent {
            rec.scale = scale_loss(&BBox3 { extent }, &gt);
        }
        if weights.reg != 0.0 {
            rec.reg = reg_loss(&cloud)?;
        }
        rec.total = weights.l1 * rec.l1
            + weights.ssim * rec.ssim_loss
            + weights.mse * rec.mse
            + weights.cam * rec.cam
            + weights.scale * rec.scale
            + weights.reg * rec.reg;
        if !rec.total.is_finite() {
            status = FitStatus::Diverged {
                step,
                reason: format!("loss is {}", rec.total),
            };
            break;
        }

        let signal: Vec<f64> = match cfg.filter.signal {
            FilterSignal::Loss => rec.per_view.clone(),
            FilterSignal::GradNorm => evals.iter().map(|e| e.grads.norm()).collect(),
        };
        rec.mask = if cfg.filter.enabled {
            window.push_batch(&signal)?
        } else {
            vec![true; views.len()]
        };

        let mut grad = vec![0.0; pk.len()];
        let mut gsum = GradientSet::zeros_like(&cloud);
        for ((e, &i), &keep) in evals.iter().zip(&views).zip(&rec.mask) {
            if keep {
                gsum.add_scaled(&e.grads, 1.0 / nv);
            } else if cfg.filter.cameras {
                continue;
            }
            let o = pk.cam_offset(i);
            for (j, g) in e.grads.camera.to_array().iter().enumerate() {
                grad[o + j] += g / nv;
            }
        }
        if weights.reg != 0.0 {
            gsum.add_scaled(&reg_grad(&cloud), weights.reg);
        }
        grad[..pk.cloud_len].copy_from_slice(&gsum.gaussian_vec());
        if let Some(gt) = gt_extent {
            let e = pk.extent_offset();
            let g = scale_loss_grad(&BBox3 { extent }, &gt) * weights.scale;
            grad[e..e + 3].copy_from_slice(g.as_slice());
        }
        if grad.iter().any(|g| !g.is_finite()) {
            status = FitStatus::Diverged {
                step,
                reason: "non-finite gradient".into(),
            };
            break;
        }

        if cfg.safeguard {
            match &snapshot {
                Some((p, o, g, r)) if rec.total > r.total => {
                    params.clone_from(p);
                    opt = o.clone();
                    grad.clone_from(g);
                    let (views, mask) = (rec.views, rec.mask);
                    rec = StepRecord {
                        step,
                        views,
                        mask,
                        ..r.clone()
                    };
                    lr_factor *= 0.5;
                }
                _ => snapshot = Some((params.clone(), opt.clone(), grad.clone(), rec.clone())),
            }
        }

        let phase = progressive_mask(&cfg.phases, step);
        let layout = build_layout(&cloud, &pk, cfg, phase);
        let lr = lr_at(&sched, step) * lr_factor;
        rec.lr = lr;
        let prev = params.clone();
        optimizer_step(&mut opt, &cfg.adam, &layout, &mut params, &grad, lr)?;
        if params.iter().any(|v| !v.is_finite()) {
            params = prev;
            status = FitStatus::Diverged {
                step,
                reason: "non-finite parameters after update".into(),
            };
            history.push(rec);
            break;
        }
        extent = unpack(&params, &pk, &mut cloud, &mut cams);
        if cfg.recenter && cfg.optimize_geometry && phase.theta && phase.phi {
            let free = cfg.stage == Stage::Unposed;
            recenter(&mut cloud, free.then_some(cams.as_mut_slice()));
            params[..pk.cloud_len].copy_from_slice(&cloud_to_vec(&cloud));
            for (i, c) in cams.iter().enumerate() {
                let o = pk.cam_offset(i);
                params[o..o + CAMERA_PARAMS].copy_from_slice(&camera_to_vec(c));
            }
        }
        history.push(rec);
    }
    extent = unpack(&params, &pk, &mut cloud, &mut cams);
    Ok(FitResult {
        cloud,
        cameras: cams,
        extent: gt_extent.map(|_| BBox3 { extent }),
        history,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizeConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub render: RenderOptions,
}

impl Default for HarmonizeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.1,
            warmup_steps: 10,
            weights: LossWeights::for_stage(Stage::Harmonize),
            adam: AdamConfig::default(),
            render: RenderOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonizeResult {
    /// `delta[i][k]`: additive change to SH coefficient `k` of Gaussian `i`.
    pub deltas: Vec<Vec<Vec3>>,
    /// The input cloud with `c' = c + delta` applied.
    pub cloud: GaussianCloud,
    pub history: Vec<f64>,
}

fn apply_deltas(cloud: &GaussianCloud, flat: &[f64]) -> GaussianCloud {
    let mut out = cloud.clone();
    let mut k = 0;
    for g in out.gaussians.iter_mut() {
        for c in g.sh.iter_mut() {
            *c += Vec3::new(flat[k], flat[k + 1], flat[k + 2]);
            k += 3;
        }
    }
    out
}

/// Refits only SH color, as additive deltas, to match `targets` (RGB) seen
/// from `cams`. Every other attribute is left untouched.
pub fn harmonize(
    cloud: &GaussianCloud,
    cams: &[Camera],
    targets: &[Image],
    cfg: &HarmonizeConfig,
) -> Result<HarmonizeResult> {
    cloud.validate()?;
    if cams.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} cameras but {} targets",
            cams.len(),
            targets.len()
        )));
    }
    if cams.is_empty() {
        return Err(Error::EmptyInput(
            "harmonize needs at least one view".into(),
        ));
    }
    let sched = Schedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps.min(cfg.steps),
        total_steps: cfg.steps,
    };
    sched.validate()?;
    let n: usize = cloud.gaussians.iter().map(|g| 3 * g.sh.len()).sum();
    let mut delta = vec![0.0; n];
    let mut opt = OptimState::new(n, cfg.lr);
    let layout = ParamLayout::uniform(n);
    let nv = cams.len() as f64;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let current = apply_deltas(cloud, &delta);
        let evals = cams
            .par_iter()
            .zip(targets)
            .map(|(c, t)| eval_view(&current, c, t, cfg.weights, &cfg.render))
            .collect::<Result<Vec<_>>>()?;
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        for e in &evals {
            total += e.value / nv;
            let mut k = 0;
            for g in &e.grads.gaussians {
                for c in &g.sh {
                    for ch in 0..3 {
                        grad[k] += c[ch] / nv;
                        k += 1;
                    }
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "harmonization loss at step {step} is {total}"
            )));
        }
        history.push(total);
        optimizer_step(
            &mut opt,
            &cfg.adam,
            &layout,
            &mut delta,
            &grad,
            lr_at(&sched, step),
        )?;
    }
    let mut deltas = Vec::with_capacity(cloud.len());
    let mut k = 0;
    for g in &cloud.gaussians {
        deltas.push(
            (0..g.sh.len())
                .map(|j| Vec3::new(delta[k + 3 * j], delta[k + 3 * j + 1], delta[k + 3 * j + 2]))
                .collect(),
        );
        k += 3 * g.sh.len();
    }
    Ok(HarmonizeResult {
        cloud: apply_deltas(cloud, &delta),
        deltas,
        history,
    })
}

/// Raw per-Gaussian output block: offsets from the bias values plus color
/// and rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawGaussian {
    pub delta_position: Vec3,
    pub delta_scale: Vec3,
    pub delta_opacity: f64,
    pub color: Vec<Vec3>,
    /// Added to the identity quaternion before normalization.
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedGaussian {
    pub position: Vec3,
    pub scale: Vec3,
    pub opacity: f64,
    pub rotation: Quaternion,
    pub sh: Vec<Vec3>,
}

impl DecodedGaussian {
    pub fn to_gaussian(&self) -> Gaussian {
        Gaussian {
            position: cartesian_to_spherical(self.position),
            scale_raw: self.scale.map(scale_inverse),
            rotation: self.rotation,
            opacity_raw: opacity_inverse(self.opacity),
            sh: self.sh.clone(),
        }
    }
}

/// Position `anchor + clamp(delta_p, radius)`, scale `exp(ds + ln 0.02)`,
/// opacity `sigmoid(da + logit 0.1)`, rotation `normalize(identity + q)`.
pub fn decode_raw_gaussian(raw: &RawGaussian, anchor: Vec3, max_offset: f64) -> DecodedGaussian {
    let d = raw.delta_position;
    let len = d.norm();
    let offset = if len > max_offset {
        d * (max_offset / len)
    } else {
        d
    };
    let q = Quaternion::new(
        1.0 + raw.rotation[0],
        raw.rotation[1],
        raw.rotation[2],
        raw.rotation[3],
    );
    DecodedGaussian {
        position: anchor + offset,
        scale: raw.delta_scale.map(scale_activation),
        opacity: opacity_activation(raw.delta_opacity),
        rotation: q.normalized(),
        sh: raw.color.clone(),
    }
}

/// Starting cloud for stage 1: positions uniform in a ball, bias-level
/// scale and opacity lifted to `scale` and `opacity`, grey color.
pub fn init_cloud(
    n: usize,
    radius: f64,
    scale: f64,
    opacity: f64,
    sh_degree: usize,
    seed: u64,
) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::invalid("initial cloud needs at least one Gaussian"));
    }
    if sh_degree > 1 {
        return Err(Error::invalid(format!(
            "SH degree {sh_degree} not supported"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gs = Vec::with_capacity(n);
    while gs.len() < n {
        let p = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if p.norm_squared() > 1.0 {
            continue;
        }
        let mut sh = vec![dc_from_rgb(Vec3::repeat(0.5))];
        sh.resize(sh_len(sh_degree), Vec3::zeros());
        gs.push(Gaussian {
            position: cartesian_to_spherical(p * radius),
            scale_raw: Vec3::repeat(scale_inverse(scale)),
            rotation: Quaternion::IDENTITY,
            opacity_raw: opacity_inverse(opacity),
            sh,
        });
    }
    let mut cloud = GaussianCloud::new(gs);
    recenter(&mut cloud, None);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::synth::{make_synthetic_cloud, CloudStyle};

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = Schedule {
            base_lr: 0.00016,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert!((lr_at(&s, 0) - 0.1 * 0.00016).abs() < 1e-18);
        assert!((lr_at(&s, 10) - 0.00016).abs() < 1e-18);
        assert!((lr_at(&s, 100) - 0.01 * 0.00016).abs() < 1e-18);
        assert_eq!(lr_at(&s, 1000), lr_at(&s, 100));
        for k in 0..100 {
            assert!((lr_at(&s, k + 1) - lr_at(&s, k)).abs() < 0.1 * 0.00016);
        }
        let bad = Schedule {
            warmup_steps: 200,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut st = OptimState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.3, -7.0, 0.0];
        optimizer_step(
            &mut st,
            &AdamConfig::default(),
            &ParamLayout::uniform(3),
            &mut p,
            &g,
            0.01,
        )
        .unwrap();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-12);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-12);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_rejects_non_finite_and_respects_frozen() {
        let mut st = OptimState::new(2, 0.1);
        let mut p = vec![1.0, 2.0];
        let mut lay = ParamLayout::uniform(2);
        assert!(optimizer_step(
            &mut st,
            &AdamConfig::default(),
            &lay,
            &mut p,
            &[f64::NAN, 0.0],
            0.1
        )
        .is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        lay.trainable[0] = false;
        optimizer_step(
            &mut st,
            &AdamConfig::default(),
            &lay,
            &mut p,
            &[f64::NAN, 1.0],
            0.1,
        )
        .unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] < 2.0);
    }

    #[test]
    fn adam_renormalizes_quaternions_and_clamps_fov() {
        let mut st = OptimState::new(5, 0.1);
        let mut p = vec![1.0, 0.0, 0.0, 0.0, 3.0];
        let lay = ParamLayout {
            quaternions: vec![0],
            fovs: vec![4],
            ..ParamLayout::uniform(5)
        };
        optimizer_step(
            &mut st,
            &AdamConfig::default(),
            &lay,
            &mut p,
            &[0.0, 1.0, -1.0, 0.5, -1.0],
            0.2,
        )
        .unwrap();
        let n: f64 = p[..4].iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(p[4], 170f64.to_radians());
    }

    #[test]
    fn view_probabilities_closed_form() {
        let p = view_count_probabilities(&ViewSamplerConfig {
            max_views: 3,
            lambda: 0.0,
        })
        .unwrap();
        assert_eq!(p, vec![1.0 / 3.0; 3]);
        let p = view_count_probabilities(&ViewSamplerConfig {
            max_views: 2,
            lambda: 2f64.ln(),
        })
        .unwrap();
        assert_eq!(p, vec![2.0 / 3.0, 1.0 / 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ViewSamplerConfig {
            max_views: 5,
            lambda: 0.5,
        };
        for _ in 0..1000 {
            let v = sample_view_count(&cfg, &mut rng).unwrap();
            assert!((1..=5).contains(&v));
        }
    }

    #[test]
    fn filter_cases() {
        assert_eq!(gradient_filter_mask(&[2.0; 6]).unwrap(), vec![true; 6]);
        let mut w = vec![1.0; 9];
        w.push(50.0);
        let m = gradient_filter_mask(&w).unwrap();
        assert!(!m[9]);
        assert!(m[..9].iter().all(|b| *b));
        assert!(gradient_filter_mask(&[]).is_err());
        // A window of n values cannot push any z-score past sqrt(n - 1).
        assert!(gradient_filter_mask(&[0.0, 0.0, 0.0, 100.0])
            .unwrap()
            .iter()
            .all(|b| *b));
    }

    #[test]
    fn sliding_window_keeps_recent_values() {
        let mut fw = FilterWindow::new(12);
        for _ in 0..5 {
            assert_eq!(fw.push_batch(&[1.0, 1.0]).unwrap(), vec![true, true]);
        }
        assert_eq!(fw.push_batch(&[1.0, 40.0]).unwrap(), vec![true, false]);
        for _ in 0..10 {
            fw.push_batch(&[3.0]).unwrap();
        }
        assert_eq!(fw.values().len(), 12);
    }

    #[test]
    fn progressive_phases() {
        let plan = PhasePlan {
            radial_only_steps: 5,
        };
        assert_eq!(
            progressive_mask(&plan, 4),
            SphericalMask {
                r: true,
                theta: false,
                phi: false
            }
        );
        assert_eq!(
            progressive_mask(&plan, 5),
            SphericalMask {
                r: true,
                theta: true,
                phi: true
            }
        );
    }

    #[test]
    fn decode_biases() {
        let raw = RawGaussian {
            delta_position: Vec3::zeros(),
            delta_scale: Vec3::zeros(),
            delta_opacity: 0.0,
            color: vec![Vec3::zeros()],
            rotation: [0.0; 4],
        };
        let d = decode_raw_gaussian(&raw, Vec3::new(0.1, 0.2, 0.3), 0.05);
        assert!((d.opacity - 0.1).abs() < 1e-15);
        assert!(d.scale.iter().all(|s| (s - 0.02).abs() < 1e-15));
        assert_eq!(d.rotation, Quaternion::IDENTITY);
        assert_eq!(d.position, Vec3::new(0.1, 0.2, 0.3));
        let far = RawGaussian {
            delta_position: Vec3::new(3.0, 4.0, 0.0),
            delta_opacity: 800.0,
            ..raw.clone()
        };
        let d = decode_raw_gaussian(&far, Vec3::zeros(), 0.05);
        assert!((d.position.norm() - 0.05).abs() < 1e-15);
        assert_eq!(d.opacity, 1.0);
        let mut last = 0.0;
        for k in -20..20 {
            let r = RawGaussian {
                delta_opacity: k as f64 * 0.25,
                delta_scale: Vec3::repeat(k as f64 * 0.25),
                ..raw.clone()
            };
            let d = decode_raw_gaussian(&r, Vec3::zeros(), 1.0);
            assert!(d.opacity > last);
            last = d.opacity;
        }
    }

    fn small_problem(n_views: usize) -> (GaussianCloud, Vec<Camera>, Vec<Image>) {
        let cloud = make_synthetic_cloud(12, 3, CloudStyle::Blob, 0).unwrap();
        let cams: Vec<Camera> = (0..n_views)
            .map(|i| {
                let a = i as f64 * 2.0 * PI / n_views as f64;
                Camera::look_at(
                    Vec3::new(1.5 * a.cos(), 1.5 * a.sin(), 0.2),
                    Vec3::zeros(),
                    CameraIntrinsics::square(1.0, 24),
                )
            })
            .collect();
        let targets = cams
            .iter()
            .map(|c| rasterize(&cloud, c, &RenderOptions::default()).unwrap().rgb)
            .collect();
        (cloud, cams, targets)
    }

    #[test]
    fn zero_steps_return_inputs() {
        let (cloud, cams, targets) = small_problem(3);
        let cfg = TrainConfig {
            stage: Stage::Unposed,
            steps: 0,
            warmup_steps: 0,
            ..Default::default()
        };
        let p = FitProblem {
            targets: &targets,
            cameras: &cams,
            gt_cameras: None,
            gt_extent: None,
        };
        let r = fit_scene(&cloud, &p, &cfg).unwrap();
        assert_eq!(r.cloud, cloud);
        assert_eq!(r.cameras, cams);
        assert!(r.history.is_empty());
    }

    #[test]
    fn stage_one_requires_ground_truth() {
        let (cloud, cams, targets) = small_problem(2);
        let p = FitProblem {
            targets: &targets,
            cameras: &cams,
            gt_cameras: None,
            gt_extent: None,
        };
        let r = fit_scene(&cloud, &p, &TrainConfig::default());
        assert!(matches!(r, Err(Error::MissingGroundTruth(_))));
    }

    #[test]
    fn phase_one_freezes_angles_and_fit_is_reproducible() {
        let (truth, cams, targets) = small_problem(3);
        let init = init_cloud(12, 0.4, 0.05, 0.5, 0, 2).unwrap();
        let cfg = TrainConfig {
            steps: 15,
            warmup_steps: 2,
            phases: PhasePlan {
                radial_only_steps: 100,
            },
            ..Default::default()
        };
        let gt_box = compute_bbox(&truth.positions()).unwrap();
        let p = FitProblem {
            targets: &targets,
            cameras: &cams,
            gt_cameras: Some(&cams),
            gt_extent: Some(gt_box),
        };
        let a = fit_scene(&init, &p, &cfg).unwrap();
        let b = fit_scene(&init, &p, &cfg).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.history, b.history);
        for (x, y) in a.cloud.gaussians.iter().zip(&init.gaussians) {
            assert_eq!(x.position.theta.to_bits(), y.position.theta.to_bits());
            assert_eq!(x.position.phi.to_bits(), y.position.phi.to_bits());
        }
        assert!(a
            .cloud
            .gaussians
            .iter()
            .zip(&init.gaussians)
            .any(|(x, y)| x.position.r != y.position.r));
        assert_eq!(a.cameras, cams);
    }

    #[test]
    fn recentering_after_phase_two_steps() {
        let (_, cams, targets) = small_problem(3);
        let init = init_cloud(10, 0.4, 0.05, 0.5, 0, 4).unwrap();
        let cfg = TrainConfig {
            stage: Stage::Unposed,
            steps: 6,
            warmup_steps: 1,
            phases: PhasePlan {
                radial_only_steps: 0,
            },
            ..Default::default()
        };
        let p = FitProblem {
            targets: &targets,
            cameras: &cams,
            gt_cameras: None,
            gt_extent: None,
        };
        let r = fit_scene(&init, &p, &cfg).unwrap();
        assert!(r.cloud.mean_position().norm() < 1e-9);
    }

    #[test]
    fn recenter_with_cameras_preserves_renders() {
        let (cloud, cams, _) = small_problem(2);
        let mut shifted = cloud.clone();
        for g in shifted.gaussians.iter_mut() {
            g.position = cartesian_to_spherical(
                spherical_to_cartesian(g.position) + Vec3::new(0.05, -0.02, 0.03),
            );
        }
        let mut moved_cams = cams.clone();
        for c in moved_cams.iter_mut() {
            c.extrinsics.translation -=
                quat_to_rotmat(c.extrinsics.rotation) * Vec3::new(0.05, -0.02, 0.03);
        }
        let before = rasterize(&shifted, &moved_cams[0], &RenderOptions::default())
            .unwrap()
            .rgb;
        recenter(&mut shifted, Some(&mut moved_cams));
        assert!(shifted.mean_position().norm() < 1e-12);
        let after = rasterize(&shifted, &moved_cams[0], &RenderOptions::default())
            .unwrap()
            .rgb;
        let diff = before
            .data
            .iter()
            .zip(&after.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn harmonize_fixed_point_and_freeze() {
        let (cloud, cams, targets) = small_problem(3);
        let cfg = HarmonizeConfig {
            steps: 20,
            ..Default::default()
        };
        let r = harmonize(&cloud, &cams, &targets, &cfg).unwrap();
        let max = r
            .deltas
            .iter()
            .flatten()
            .map(|d| d.amax())
            .fold(0.0, f64::max);
        assert!(max < 1e-3, "{max}");
        for (a, b) in r.cloud.gaussians.iter().zip(&cloud.gaussians) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.scale_raw, b.scale_raw);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.opacity_raw, b.opacity_raw);
        }
    }
}
