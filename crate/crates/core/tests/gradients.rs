use gsfit::grad::{gradcheck, GradcheckOptions, SquaredErrorLoss, WeightedSumLoss};
use gsfit::synth::{gradcheck_fixture, random_scene};
use gsfit::{backward_render, rasterize, Image, RenderOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64, lo: f64, hi: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random_range(lo..hi)).collect();
    Image::from_data(w, h, 3, data).unwrap()
}

#[test]
fn random_scenes_pass_gradcheck() {
    for seed in 0..4u64 {
        let (cloud, cam) = random_scene(2 + (seed as usize * 5) % 15, 32, 1, seed).unwrap();
        let loss = WeightedSumLoss {
            weights: random_image(32, 32, seed + 50, -1.0, 1.0),
        };
        let report = gradcheck(&cloud, &cam, &loss, &GradcheckOptions::default()).unwrap();
        assert!(
            report.passed,
            "seed {seed}: max rel error {}",
            report.max_rel_error
        );
    }
}

#[test]
fn fixture_passes_with_squared_error() {
    let (cloud, cam) = gradcheck_fixture();
    let loss = SquaredErrorLoss {
        target: random_image(16, 16, 3, 0.0, 1.0),
    };
    let report = gradcheck(&cloud, &cam, &loss, &GradcheckOptions::default()).unwrap();
    assert!(report.passed, "max rel error {}", report.max_rel_error);
    assert!(
        report.classes.iter().all(|c| c.checked > 0),
        "{:?}",
        report.classes
    );
}

#[test]
fn camera_routes_sum_to_full_gradient() {
    let opts = RenderOptions::default();
    for seed in 0..5u64 {
        let (cloud, cam) = random_scene(12, 32, 1, seed).unwrap();
        let out = rasterize(&cloud, &cam, &opts).unwrap();
        let d = random_image(32, 32, seed, -1.0, 1.0);
        let g = backward_render(&cloud, &cam, &out, &d, &opts).unwrap();
        let p = g.camera_parts;
        let full = g.camera.to_array();
        let (a, b, c) = (
            p.via_mean.to_array(),
            p.via_cov.to_array(),
            p.via_color.to_array(),
        );
        for k in 0..full.len() {
            let scale = full[k].abs().max(1.0);
            assert!(
                (a[k] + b[k] + c[k] - full[k]).abs() <= 1e-12 * scale,
                "slot {k}"
            );
        }
        assert!(c.iter().any(|v| *v != 0.0));
    }
}

#[test]
fn deterministic_backward_is_repeatable() {
    let opts = RenderOptions::default();
    let (cloud, cam) = random_scene(16, 32, 1, 9).unwrap();
    let out = rasterize(&cloud, &cam, &opts).unwrap();
    let d = random_image(32, 32, 1, -1.0, 1.0);
    let a = backward_render(&cloud, &cam, &out, &d, &opts).unwrap();
    let b = backward_render(&cloud, &cam, &out, &d, &opts).unwrap();
    assert_eq!(a, b);
}
