mod common;

use cso_unmix::imaging::{
    build_steering_matrix, pixel_response, psf_value, render_scene, SensorConfig, SubPixelGrid,
    Target, TargetScene,
};
use cso_unmix::rng::rng_from_seed;
use rand::Rng;

#[test]
fn psf_integrates_to_one() {
    let f = |x: f64, y: f64| psf_value(x, y, (0.3, -0.2), 0.5).unwrap();
    let total = common::integrate_2d(&f, (-8.0, 8.0), (-8.0, 8.0), 1e-12);
    assert!((total - 1.0).abs() < 1e-8, "{total}");
}

#[test]
fn psf_matches_direct_formula() {
    let v = psf_value(0.1, 0.7, (0.4, 0.2), 0.8).unwrap();
    assert!((v - common::gaussian(0.1, 0.7, 0.4, 0.2, 0.8)).abs() < 1e-15);
}

#[test]
fn pixel_response_matches_quadrature() {
    let mut rng = rng_from_seed(2024);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let sigma = rng.gen_range(0.3..1.0);
        let d = 1.0;
        let center = (rng.gen_range(0.0..11.0f64).floor() + 0.5, rng.gen_range(0.0..11.0f64).floor() + 0.5);
        let t = Target::new(
            center.0 + rng.gen_range(-2.0..2.0),
            center.1 + rng.gen_range(-2.0..2.0),
            1.0,
        );
        let closed = pixel_response(center, &t, d, sigma).unwrap();
        let f = |x: f64, y: f64| common::gaussian(x, y, t.x, t.y, sigma);
        let quad = common::integrate_2d(
            &f,
            (center.0 - 0.5 * d, center.0 + 0.5 * d),
            (center.1 - 0.5 * d, center.1 + 0.5 * d),
            1e-14,
        );
        let rel = (closed - quad).abs() / quad.abs().max(1e-300);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn steering_columns_energy() {
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    let g = build_steering_matrix(&grid, &sensor).unwrap();
    for l in 0..g.cols() {
        let sum: f64 = g.matrix.column(l).iter().sum();
        assert!(sum <= 1.0 + 1e-12, "column {l} sums to {sum}");
    }
    // cell (16, 16) sits at the sensor center
    let center = 16 * 33 + 16;
    assert_eq!(grid.centers[center], (5.5, 5.5));
    let sum: f64 = g.matrix.column(center).iter().sum();
    assert!(sum > 0.999, "{sum}");
}

#[test]
fn steering_point_symmetry() {
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    let g = build_steering_matrix(&grid, &sensor).unwrap();
    let (hw, hh) = (grid.hi_res_width(), grid.hi_res_height());
    let n = sensor.num_pixels();
    for l in [0, 17, 100, 500, 544, 700, 1088] {
        let (hx, hy) = (l % hw, l / hw);
        let mirror = (hh - 1 - hy) * hw + (hw - 1 - hx);
        for p in 0..n {
            let (px, py) = (p % sensor.width_px, p / sensor.width_px);
            let q = (sensor.height_px - 1 - py) * sensor.width_px + (sensor.width_px - 1 - px);
            assert!((g.matrix.get(p, l) - g.matrix.get(q, mirror)).abs() < 1e-12);
        }
        // transpose symmetry of a square sensor
        let swapped = hx * hw + hy;
        for p in 0..n {
            let (px, py) = (p % sensor.width_px, p / sensor.width_px);
            let q = px * sensor.width_px + py;
            assert!((g.matrix.get(p, l) - g.matrix.get(q, swapped)).abs() < 1e-12);
        }
    }
}

#[test]
fn rendering_is_linear() {
    let sensor = SensorConfig::default();
    let a = vec![Target::new(5.2, 5.7, 231.0), Target::new(4.1, 6.3, 244.0)];
    let b = vec![Target::new(5.9, 5.1, 220.5)];
    let all: Vec<Target> = a.iter().chain(&b).copied().collect();
    let ra = render_scene(&TargetScene::new(a, sensor).unwrap(), 0).unwrap();
    let rb = render_scene(&TargetScene::new(b, sensor).unwrap(), 0).unwrap();
    let rall = render_scene(&TargetScene::new(all, sensor).unwrap(), 0).unwrap();
    for ((x, y), z) in ra.pixels.iter().zip(&rb.pixels).zip(&rall.pixels) {
        assert!((x + y - z).abs() <= 1e-12 * z.abs().max(1.0));
    }
}

#[test]
fn grid_target_matches_steering_column() {
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    let g = build_steering_matrix(&grid, &sensor).unwrap();
    for l in [0, 400, 544, 545, 1000] {
        let (x, y) = grid.centers[l];
        let scene = TargetScene::new(vec![Target::new(x, y, 237.0)], sensor).unwrap();
        let img = render_scene(&scene, 0).unwrap();
        let col = g.matrix.column(l);
        for (p, c) in img.pixels.iter().zip(&col) {
            assert!((p - 237.0 * c).abs() < 1e-10);
        }
    }
}

#[test]
fn grid_cells_are_evenly_spaced_inside_sensor() {
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    assert_eq!(grid.len(), 11 * 11 * 9);
    for (x, y) in &grid.centers {
        assert!(*x > 0.0 && *x < 11.0 && *y > 0.0 && *y < 11.0);
    }
    let dx = grid.centers[1].0 - grid.centers[0].0;
    assert!((dx - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn noisy_energy_bound() {
    let sensor = SensorConfig {
        noise_sigma: 0.5,
        ..Default::default()
    };
    let targets = vec![Target::new(5.3, 5.6, 240.0), Target::new(5.8, 5.2, 225.0)];
    let scene = TargetScene::new(targets, sensor).unwrap();
    for seed in 0..50 {
        let img = render_scene(&scene, seed).unwrap();
        assert!(img.sum() <= 465.0 + 5.0 * 0.5 * 11.0);
    }
}
