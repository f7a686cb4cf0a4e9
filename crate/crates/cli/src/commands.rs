//! One function per subcommand. Inputs are loaded and checked and all work
//! is done before the output directory is touched, so a rejected run leaves
//! nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use gsfit::grad::{gradcheck, GradcheckOptions, WeightedSumLoss};
use gsfit::loss::{geometry_metrics, psnr, ssim, to_metric, MetricScale, Stage, SSIM_WINDOW};
use gsfit::synth::{
    gradcheck_fixture, load_cameras, load_cloud, load_dataset, load_view_image,
    make_synthetic_cloud, perturb_cameras, random_scene, render_dataset, sample_orbit_cameras,
    save_cameras, save_cloud, save_dataset, save_view_images, write_json,
};
use gsfit::train::{fit_scene, init_cloud, FitProblem, FitStatus};
use gsfit::{rasterize, BBox3, Camera, GaussianCloud, Image, RenderOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{GradcheckScene, RunConfig};
use crate::error::CliError;

const SCENE_SEED_OFFSET: u64 = 1;
const INIT_SEED_OFFSET: u64 = 2;
const PERTURB_SEED_OFFSET: u64 = 3;

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path
        .clone()
        .ok_or_else(|| CliError::input(format!("missing {what} path")))?;
    if !p.exists() {
        return Err(CliError::input(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(p)
}

fn check_optional(path: &Option<PathBuf>, what: &str) -> Result<(), CliError> {
    match path {
        Some(p) if !p.exists() => Err(CliError::input(format!(
            "{what} {} does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

/// Creates `out` and writes the resolved config into it.
fn begin(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let text = cfg.to_toml()?;
    fs::create_dir_all(out).map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    fs::write(out.join("config.toml"), text)
        .map_err(|e| CliError::input(format!("{}: {e}", out.display())))
}

/// JSON number, or `"inf"` / `"-inf"` / `"nan"` for values JSON cannot hold.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else if x.is_nan() {
        json!("nan")
    } else if x > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn render_rgb(
    cloud: &GaussianCloud,
    cams: &[Camera],
    opts: &RenderOptions,
) -> Result<Vec<Image>, CliError> {
    Ok(cams
        .iter()
        .map(|c| rasterize(cloud, c, opts).map(|o| o.rgb))
        .collect::<gsfit::Result<Vec<_>>>()?)
}

/// Mean PSNR and SSIM over view pairs. SSIM is absent for images smaller
/// than its window.
fn image_metrics(pred: &[Image], gt: &[Image]) -> Result<(f64, Option<f64>), CliError> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(CliError::input(format!(
            "{} predicted images for {} ground-truth images",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let with_ssim = pred
        .iter()
        .all(|a| a.width >= SSIM_WINDOW && a.height >= SSIM_WINDOW);
    let (mut p, mut s) = (0.0, 0.0);
    for (a, b) in pred.iter().zip(gt) {
        p += psnr(a, b)? / n;
        if with_ssim {
            s += ssim(a, b)? / n;
        }
    }
    Ok((p, with_ssim.then_some(s)))
}

pub fn sample_cameras(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cams = sample_orbit_cameras(&cfg.orbit)?;
    begin(out, cfg)?;
    save_cameras(&out.join("cameras.json"), &cams)?;
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cams = sample_orbit_cameras(&cfg.orbit)?;
    let cloud = make_synthetic_cloud(
        cfg.scene.gaussians,
        cfg.seed.wrapping_add(SCENE_SEED_OFFSET),
        cfg.scene.style,
        cfg.scene.sh_degree,
    )?;
    let mut ds = render_dataset(&cloud, &cams, cfg.orbit.resolution, &cfg.render)?;
    ds.meta.seed = cfg.seed;
    ds.meta.config = serde_json::to_value(cfg).map_err(|e| CliError::config(e.to_string()))?;
    begin(out, cfg)?;
    save_dataset(out, &ds)?;
    Ok(())
}

pub fn render(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let cloud_path = require(&cfg.inputs.cloud, "cloud")?;
    check_optional(&cfg.inputs.cameras, "camera file")?;
    let cloud = load_cloud(&cloud_path)?;
    let cams = match &cfg.inputs.cameras {
        Some(p) => load_cameras(p)?,
        None => sample_orbit_cameras(&cfg.orbit)?,
    };
    let images = cams
        .iter()
        .map(|c| rasterize(&cloud, c, &cfg.render).map(|o| o.rgba()))
        .collect::<gsfit::Result<Vec<_>>>()?;
    begin(out, cfg)?;
    save_view_images(out, &images)?;
    save_cameras(&out.join("cameras.json"), &cams)?;
    Ok(())
}

fn split_views(n: usize, every: usize) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| every == 0 || i % every != every - 1)
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = require(&cfg.fit.data, "dataset")?;
    check_optional(&cfg.fit.init_cloud, "initial cloud")?;
    check_optional(&cfg.fit.init_cameras, "initial camera file")?;
    if cfg.train.stage == Stage::Harmonize {
        return Err(CliError::config("fit runs stage 1 or 2"));
    }
    cfg.train.validate()?;
    let ds = load_dataset(&data)?;
    let (train, held) = split_views(ds.len(), cfg.fit.holdout_every);
    if train.is_empty() {
        return Err(CliError::input(
            "no training views left after the hold-out split",
        ));
    }
    let rgb = (0..ds.len())
        .map(|i| ds.rgb(i))
        .collect::<gsfit::Result<Vec<_>>>()?;
    let pick =
        |idx: &[usize], all: &[Image]| idx.iter().map(|&i| all[i].clone()).collect::<Vec<_>>();
    let targets = pick(&train, &rgb);
    let gt_train: Vec<Camera> = train.iter().map(|&i| ds.cameras[i]).collect();
    let gt_held: Vec<Camera> = held.iter().map(|&i| ds.cameras[i]).collect();

    let init = match &cfg.fit.init_cloud {
        Some(p) => load_cloud(p)?,
        None => {
            let i = &cfg.fit.init;
            init_cloud(
                i.gaussians,
                i.radius,
                i.scale,
                i.opacity,
                i.sh_degree,
                cfg.seed.wrapping_add(INIT_SEED_OFFSET),
            )?
        }
    };
    let extent = ds
        .meta
        .metric_extent
        .or(ds.cloud.as_ref().and_then(|c| c.metric_extent));
    let start_cams = match (cfg.train.stage, &cfg.fit.init_cameras) {
        (Stage::Posed, _) => gt_train.clone(),
        (_, Some(p)) => {
            let all = load_cameras(p)?;
            if all.len() != ds.len() {
                return Err(CliError::input(format!(
                    "{} initial cameras for {} dataset views",
                    all.len(),
                    ds.len()
                )));
            }
            train.iter().map(|&i| all[i]).collect()
        }
        (_, None) => perturb_cameras(
            &gt_train,
            cfg.fit.perturb_rotation_deg,
            cfg.fit.perturb_translation_frac,
            cfg.seed.wrapping_add(PERTURB_SEED_OFFSET),
        )?,
    };
    let problem = match cfg.train.stage {
        Stage::Posed => FitProblem {
            targets: &targets,
            cameras: &start_cams,
            gt_cameras: Some(&gt_train),
            gt_extent: Some(extent.ok_or_else(|| {
                CliError::input(
                    "stage 1 needs a metric extent in the dataset meta.json or cloud.json",
                )
            })?),
        },
        _ => FitProblem {
            targets: &targets,
            cameras: &start_cams,
            gt_cameras: None,
            gt_extent: None,
        },
    };
    let result = fit_scene(&init, &problem, &cfg.train)?;

    let mut cloud = result.cloud.clone();
    if result.extent.is_some() {
        cloud.metric_extent = result.extent;
    }
    let heldout = if gt_held.is_empty() {
        Value::Null
    } else {
        let pred = render_rgb(&cloud, &gt_held, &cfg.render)?;
        let (p, s) = image_metrics(&pred, &pick(&held, &rgb))?;
        json!({ "views": held, "psnr": num(p), "ssim": s.map(num) })
    };
    let camera_error = if cfg.train.stage == Stage::Posed {
        Value::Null
    } else {
        let mut rot: f64 = 0.0;
        let mut center: f64 = 0.0;
        for (a, b) in result.cameras.iter().zip(&gt_train) {
            rot = rot.max(
                a.extrinsics
                    .rotation
                    .geodesic_angle(b.extrinsics.rotation)
                    .to_degrees(),
            );
            center = center.max((a.center() - b.center()).norm() / b.center().norm());
        }
        json!({ "max_rotation_deg": num(rot), "max_center_frac": num(center) })
    };
    let last = result.history.last();
    let (status, divergence) = match &result.status {
        FitStatus::Completed => ("completed", Value::Null),
        FitStatus::Diverged { step, reason } => {
            ("diverged", json!({ "step": step, "reason": reason }))
        }
    };
    let report = json!({
        "stage": cfg.train.stage,
        "status": status,
        "divergence": divergence,
        "steps": result.history.len(),
        "train_views": train,
        "final_total": last.map(|h| num(h.total)),
        "final_psnr": last.map(|h| num(h.psnr)),
        "heldout": heldout,
        "extent": result.extent.map(|b| [b.extent.x, b.extent.y, b.extent.z]),
        "camera_error": camera_error,
    });
    let mut history = String::new();
    for h in &result.history {
        history.push_str(&serde_json::to_string(h).map_err(|e| CliError::input(e.to_string()))?);
        history.push('\n');
    }

    begin(out, cfg)?;
    save_cloud(&out.join("cloud.json"), &cloud)?;
    save_cameras(&out.join("cameras.json"), &result.cameras)?;
    fs::write(out.join("history.jsonl"), history)
        .map_err(|e| CliError::input(format!("{}: {e}", out.display())))?;
    write_json(&out.join("report.json"), &report)?;
    match result.status {
        FitStatus::Completed => Ok(()),
        FitStatus::Diverged { step, reason } => Err(CliError::numerical(
            "diverged",
            format!("fit diverged at step {step}: {reason}"),
        )),
    }
}

pub fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    if !(g.tolerance > 0.0 && g.step > 0.0) {
        return Err(CliError::config(
            "gradcheck tolerance and step must be positive",
        ));
    }
    let (cloud, cam) = match g.scene {
        GradcheckScene::Fixture => gradcheck_fixture(),
        GradcheckScene::Random {
            gaussians,
            resolution,
            sh_degree,
        } => random_scene(gaussians, resolution, sh_degree, cfg.seed)?,
    };
    let (w, h) = (
        cam.intrinsics.width as usize,
        cam.intrinsics.height as usize,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let weights = (0..w * h * 3)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let loss = WeightedSumLoss {
        weights: Image::from_data(w, h, 3, weights)?,
    };
    let opts = GradcheckOptions {
        step: g.step,
        tolerance: g.tolerance,
    };
    let report = gradcheck(&cloud, &cam, &loss, &opts)?;
    begin(out, cfg)?;
    write_json(&out.join("gradcheck.json"), &report)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::numerical(
            "gradcheck",
            format!(
                "max relative error {:e} exceeds tolerance {:e}",
                report.max_rel_error, report.tolerance
            ),
        ))
    }
}

/// Images of a prediction directory: its own `images/` when present,
/// otherwise renders of its cloud under its cameras (or the ground-truth
/// cameras when it has none matching the view count).
fn prediction_images(
    dir: &Path,
    cloud: &GaussianCloud,
    gt_cams: &[Camera],
    opts: &RenderOptions,
) -> Result<Vec<Image>, CliError> {
    let n = gt_cams.len();
    if dir.join("images").is_dir() {
        return (0..n)
            .map(|i| Ok(to_rgb(load_view_image(dir, i)?)?))
            .collect();
    }
    let own = dir.join("cameras.json");
    let cams = if own.exists() {
        let c = load_cameras(&own)?;
        if c.len() == n {
            c
        } else {
            gt_cams.to_vec()
        }
    } else {
        gt_cams.to_vec()
    };
    render_rgb(cloud, &cams, opts)
}

fn to_rgb(img: Image) -> gsfit::Result<Image> {
    if img.channels == 4 {
        img.rgb_part()
    } else {
        Ok(img)
    }
}

fn metric_points(
    cloud: &GaussianCloud,
    fallback: Option<BBox3>,
    which: &str,
) -> Result<Vec<gsfit::Vec3>, CliError> {
    let extent = cloud.metric_extent.or(fallback).ok_or_else(|| {
        CliError::input(format!(
            "{which} has no metric extent; metric-scale evaluation needs one"
        ))
    })?;
    Ok(to_metric(&cloud.positions(), &extent)?)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let pred_dir = require(&cfg.eval.prediction, "prediction")?;
    let gt_dir = require(&cfg.eval.ground_truth, "ground truth")?;
    let gt = load_dataset(&gt_dir)?;
    let gt_cloud = gt
        .cloud
        .clone()
        .ok_or_else(|| CliError::input(format!("{} has no cloud.json", gt_dir.display())))?;
    let pred_cloud = load_cloud(&pred_dir.join("cloud.json"))?;
    let gt_rgb = (0..gt.len())
        .map(|i| gt.rgb(i))
        .collect::<gsfit::Result<Vec<_>>>()?;
    let pred_rgb = prediction_images(&pred_dir, &pred_cloud, &gt.cameras, &cfg.render)?;
    let (p, s) = image_metrics(&pred_rgb, &gt_rgb)?;
    let scale = cfg.eval.scale;
    let (pp, gp) = match scale {
        MetricScale::Normalized => (pred_cloud.positions(), gt_cloud.positions()),
        MetricScale::Metric => (
            metric_points(&pred_cloud, None, "prediction")?,
            metric_points(&gt_cloud, gt.meta.metric_extent, "ground truth")?,
        ),
    };
    let g = geometry_metrics(&pp, &gp, scale)?;
    let report = json!({
        "scale": scale,
        "cd_multiplier": scale.cd_multiplier(),
        "f_score_threshold": g.f_score_threshold,
        "views": gt.len(),
        "metrics": {
            "ssim": s.map(num),
            "psnr": num(p),
            "lpips": "unavailable",
            "cd": num(g.chamfer),
            "f_score": num(g.f_score),
        },
    });
    begin(out, cfg)?;
    write_json(&out.join("eval.json"), &report)?;
    Ok(())
}
