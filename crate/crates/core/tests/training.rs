use gsfit::loss::Stage;
use gsfit::synth::{make_synthetic_cloud, sample_orbit_cameras, CloudStyle, OrbitConfig};
use gsfit::train::{fit_scene, FitProblem, TrainConfig};
use gsfit::{rasterize, Camera, CameraExtrinsics, Image, Quaternion, RenderOptions, Vec3};

fn off_camera_error(filter_cameras: bool) -> (f64, f64, usize) {
    let gt = make_synthetic_cloud(64, 5, CloudStyle::Blob, 0).unwrap();
    let orbit = OrbitConfig {
        orbits: 1,
        views_per_orbit: 12,
        seed: 5,
        ..Default::default()
    };
    let cams = sample_orbit_cameras(&orbit).unwrap();
    let opts = RenderOptions::default();
    let targets: Vec<Image> = cams
        .iter()
        .map(|c| rasterize(&gt, c, &opts).unwrap().rgb)
        .collect();
    let mut init = cams.clone();
    let c = cams[0];
    let q = c.extrinsics.rotation.mul(Quaternion::from_axis_angle(
        Vec3::new(0.3, 1.0, 0.2).normalize(),
        4f64.to_radians(),
    ));
    init[0] = Camera::new(
        CameraExtrinsics::from_rotation_center(q.normalized(), c.center()),
        c.intrinsics,
    );
    let mut cfg = TrainConfig {
        stage: Stage::Unposed,
        steps: 400,
        warmup_steps: 30,
        optimize_geometry: false,
        seed: 5,
        ..Default::default()
    };
    cfg.filter.cameras = filter_cameras;
    let problem = FitProblem {
        targets: &targets,
        cameras: &init,
        gt_cameras: None,
        gt_extent: None,
    };
    let r = fit_scene(&gt, &problem, &cfg).unwrap();
    let err = |k: &Camera| {
        k.extrinsics
            .rotation
            .geodesic_angle(c.extrinsics.rotation)
            .to_degrees()
    };
    let masked = r
        .history
        .iter()
        .filter(|h| h.views.iter().zip(&h.mask).any(|(&v, &m)| v == 0 && !m))
        .count();
    (err(&init[0]), err(&r.cameras[0]), masked)
}

#[test]
fn filtered_views_still_update_their_own_camera() {
    let (start, exempt, masked) = off_camera_error(false);
    let (_, frozen, masked_frozen) = off_camera_error(true);
    assert!(
        masked > 0 && masked_frozen > 0,
        "the off view was never filtered"
    );
    assert!(exempt < 0.5 * start, "{start} -> {exempt}");
    assert!(exempt < frozen, "exempt {exempt} vs filtered {frozen}");
}
