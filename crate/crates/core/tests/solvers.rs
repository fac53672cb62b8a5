mod common;

use cso_unmix::imaging::{build_steering_matrix, SensorConfig, SubPixelGrid};
use cso_unmix::linalg::DenseMatrix;
use cso_unmix::rng::rng_from_seed;
use cso_unmix::solvers::{
    apply_init, estimate_step_size, fit_linear_init, ista_solve, ista_step, objective,
    soft_threshold, LinearInit, Ridge, SolverConfig, Threshold,
};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = rng_from_seed(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn identity_step_is_closed_form_fixed_point() {
    let g = DenseMatrix::identity(2);
    let z = [1.0, 0.1];
    let s1 = ista_step(&[0.0, 0.0], &z, &g, 1.0, 0.2).unwrap();
    assert!((s1[0] - 0.8).abs() < 1e-10 && s1[1].abs() < 1e-10);
    let s2 = ista_step(&s1, &z, &g, 1.0, 0.2).unwrap();
    for (a, b) in s1.iter().zip(&s2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_lambda_is_plain_gradient_step() {
    let g = random_matrix(4, 6, 1);
    let z = random_vec(4, 2);
    let s = random_vec(6, 3);
    let rho = 0.01;
    let out = ista_step(&s, &z, &g, rho, 0.0).unwrap();
    let gs = common::naive_matvec(g.data(), 4, 6, &s);
    let resid: Vec<f64> = gs.iter().zip(&z).map(|(a, b)| a - b).collect();
    let gtr = common::naive_matvec(g.transpose().data(), 6, 4, &resid);
    for i in 0..6 {
        assert!((out[i] - (s[i] - rho * gtr[i])).abs() < 1e-12);
    }
}

#[test]
fn prox_is_scalar_minimizer() {
    let mut rng = rng_from_seed(9);
    for _ in 0..200 {
        let v: f64 = rng.gen_range(-3.0..3.0);
        let theta: f64 = rng.gen_range(0.0..2.0);
        let got = soft_threshold(&[v], Threshold::Scalar(theta)).unwrap()[0];
        let f = |s: f64| 0.5 * (s - v).powi(2) + theta * s.abs();
        // coarse grid then a fine grid around the best point
        let mut best = (-5.0f64..).step_by_f64(1e-3, 10_001).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        best = (best - 1e-3..).step_by_f64(1e-7, 20_001).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        assert!((got - best).abs() < 1e-6, "v={v} theta={theta} got={got} grid={best}");
    }
}

trait StepBy {
    fn step_by_f64(self, h: f64, n: usize) -> Box<dyn Iterator<Item = f64>>;
}

impl StepBy for std::ops::RangeFrom<f64> {
    fn step_by_f64(self, h: f64, n: usize) -> Box<dyn Iterator<Item = f64>> {
        let start = self.start;
        Box::new((0..n).map(move |i| start + h * i as f64))
    }
}

#[test]
fn monotone_descent_with_safe_step() {
    for seed in 0..100 {
        let (m, n) = (8 + seed as usize % 5, 20 + seed as usize % 7);
        let g = random_matrix(m, n, 100 + seed);
        let z = random_vec(m, 200 + seed);
        let rho = estimate_step_size(&g).unwrap();
        let cfg = SolverConfig {
            max_iters: 500,
            ..SolverConfig::new(rho, 0.1)
        };
        let res = ista_solve(&z, &g, &cfg, None).unwrap();
        let start = objective(&vec![0.0; n], &z, &g, 0.1).unwrap();
        let mut prev = start;
        for (k, v) in res.trace.iter().enumerate() {
            assert!(*v <= prev + 1e-10, "seed {seed} iteration {k}: {v} > {prev}");
            prev = *v;
        }
    }
}

#[test]
fn matches_coordinate_descent_oracle() {
    for seed in 0..10 {
        let (m, n) = (6, 12);
        let g = random_matrix(m, n, 300 + seed);
        let z = random_vec(m, 400 + seed);
        let lambda = 0.3;
        let rho = estimate_step_size(&g).unwrap();
        let cfg = SolverConfig {
            max_iters: 200_000,
            stop_tol: 1e-12,
            ..SolverConfig::new(rho, lambda)
        };
        let res = ista_solve(&z, &g, &cfg, None).unwrap();
        let ours = objective(&res.solution, &z, &g, lambda).unwrap();
        let cd = common::coordinate_descent(g.data(), m, n, &z, lambda);
        let oracle = common::lasso_objective(g.data(), m, n, &z, &cd, lambda);
        assert!((ours - oracle).abs() < 1e-6, "seed {seed}: {ours} vs {oracle}");
    }
}

#[test]
fn larger_lambda_is_sparser() {
    use cso_unmix::imaging::{render_scene, Target, TargetScene};
    use cso_unmix::solvers::{lambda_scale, LAMBDA_GRID};
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    let g = build_steering_matrix(&grid, &sensor).unwrap().matrix;
    let rho = estimate_step_size(&g).unwrap();
    let scene = TargetScene::new(
        vec![Target::new(5.2, 5.3, 230.0), Target::new(5.8, 5.7, 245.0), Target::new(5.3, 5.9, 221.0)],
        sensor,
    )
    .unwrap();
    let z = render_scene(&scene, 0).unwrap().pixels;
    let scale = lambda_scale(&g, &z).unwrap();
    let mut prev = usize::MAX;
    let mut checked = 0;
    for m in LAMBDA_GRID {
        let cfg = SolverConfig {
            max_iters: 20_000,
            stop_tol: 1e-10,
            ..SolverConfig::new(rho, m * scale)
        };
        let res = ista_solve(&z, &g, &cfg, None).unwrap();
        if !res.converged {
            continue;
        }
        let nnz = res.solution.iter().filter(|v| **v != 0.0).count();
        assert!(nnz <= prev, "multiplier {m}: {nnz} > {prev}");
        prev = nnz;
        checked += 1;
    }
    assert!(checked >= 5);
}

#[test]
fn larger_lambda_is_sparser_orthogonal_design() {
    // scaled orthonormal columns: the lasso solution is soft(G^T z) / scale
    let q = DenseMatrix::identity(8).scaled(1.7);
    let z = random_vec(8, 61);
    let rho = estimate_step_size(&q).unwrap();
    let mut prev = usize::MAX;
    for lambda in [0.0, 0.1, 0.3, 0.7, 1.0, 1.5, 3.0] {
        let res = ista_solve(&z, &q, &SolverConfig::new(rho, lambda), None).unwrap();
        assert!(res.converged);
        let nnz = res.solution.iter().filter(|v| **v != 0.0).count();
        assert!(nnz <= prev);
        prev = nnz;
    }
}

#[test]
fn converged_solution_is_a_fixed_point() {
    let g = random_matrix(12, 16, 11);
    let z = random_vec(12, 12);
    let rho = estimate_step_size(&g).unwrap();
    let cfg = SolverConfig {
        max_iters: 100_000,
        ..SolverConfig::new(rho, 0.05)
    };
    let res = ista_solve(&z, &g, &cfg, None).unwrap();
    assert!(res.converged);
    let again = ista_step(&res.solution, &z, &g, rho, 0.05).unwrap();
    let diff: f64 = again.iter().zip(&res.solution).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = res.solution.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(diff <= 10.0 * cfg.stop_tol * norm);
}

#[test]
fn steering_step_size_is_stable() {
    let sensor = SensorConfig::default();
    let grid = SubPixelGrid::new(&sensor, 3).unwrap();
    let g = build_steering_matrix(&grid, &sensor).unwrap();
    let a = estimate_step_size(&g.matrix).unwrap();
    let b = estimate_step_size(&g.matrix).unwrap();
    assert!(a.is_finite() && a > 0.0);
    assert!((a - b).abs() <= 1e-8 * a);
}

#[test]
fn linear_init_recovers_known_map() {
    let (uv, l, m) = (6, 9, 60);
    let a = random_matrix(l, uv, 21);
    let z = random_matrix(uv, m, 22);
    let s = DenseMatrix::from_fn(l, m, |r, c| (0..uv).map(|k| a.get(r, k) * z.get(k, c)).sum());
    let q = fit_linear_init(&z, &s, Ridge::None).unwrap();
    assert!(q.q.frobenius_distance(&a) < 1e-8);
}

#[test]
fn linear_init_identity_measurements() {
    let s = random_matrix(7, 5, 31);
    let q = fit_linear_init(&DenseMatrix::identity(5), &s, Ridge::None).unwrap();
    assert!(q.q.frobenius_distance(&s) < 1e-12);
}

#[test]
fn linear_init_is_least_squares_optimal() {
    let (uv, l, m) = (5, 4, 40);
    let z = random_matrix(uv, m, 41);
    let s = random_matrix(l, m, 42);
    let q = fit_linear_init(&z, &s, Ridge::Auto).unwrap();
    let resid = |a: &DenseMatrix| {
        let mut acc = 0.0;
        for r in 0..l {
            for c in 0..m {
                let p: f64 = (0..uv).map(|k| a.get(r, k) * z.get(k, c)).sum();
                acc += (p - s.get(r, c)).powi(2);
            }
        }
        acc.sqrt()
    };
    let best = resid(&q.q);
    for seed in 0..100 {
        let a = random_matrix(l, uv, 1000 + seed);
        assert!(best <= resid(&a) + 1e-9);
    }
}

#[test]
fn apply_init_matches_naive_product() {
    assert!(apply_init(&LinearInit { q: DenseMatrix::zeros(4, 3) }, &[1.0, 2.0, 3.0])
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));
    let z = random_vec(3, 51);
    assert_eq!(apply_init(&LinearInit { q: DenseMatrix::identity(3) }, &z).unwrap(), z);
    let q = random_matrix(9, 5, 52);
    let z = random_vec(5, 53);
    let got = apply_init(&LinearInit { q: q.clone() }, &z).unwrap();
    let want = common::naive_matvec(q.data(), 9, 5, &z);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

