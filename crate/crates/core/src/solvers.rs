//! Classical sparse recovery: the l1 proximal operator, ISTA, and the
//! least-squares linear initializer.
//!
//! The objective is `F(s) = 0.5 * |z - G s|^2 + lambda * |s|_1`, so one ISTA step
//! is a gradient step of size `rho` followed by soft-thresholding at `rho * lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, DenseMatrix};

/// Regularization multipliers searched for the ISTA baseline, in units of
/// `max |G^T z|`.
pub const LAMBDA_GRID: [f64; 8] = [0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0];

/// Consecutive objective increases that count as divergence.
pub const DIVERGENCE_RUN: usize = 10;

#[derive(Clone, Copy, Debug)]
pub enum Threshold<'a> {
    Scalar(f64),
    PerElement(&'a [f64]),
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `sign(v) * max(|v| - theta, 0)` elementwise.
pub fn soft_threshold(v: &[f64], theta: Threshold<'_>) -> Result<Vec<f64>> {
    match theta {
        Threshold::Scalar(t) => {
            if !(t >= 0.0) {
                return Err(Error::Domain(format!("threshold {t} must be nonnegative")));
            }
            Ok(v.iter().map(|x| shrink(*x, t)).collect())
        }
        Threshold::PerElement(ts) => {
            if ts.len() != v.len() {
                return Err(Error::Shape(format!(
                    "{} thresholds for {} values",
                    ts.len(),
                    v.len()
                )));
            }
            if let Some(i) = ts.iter().position(|t| !(*t >= 0.0)) {
                return Err(Error::Domain(format!(
                    "threshold {} at index {i} must be nonnegative",
                    ts[i]
                )));
            }
            Ok(v.iter().zip(ts).map(|(x, t)| shrink(*x, *t)).collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step_size: f64,
    pub reg_weight: f64,
    pub max_iters: usize,
    pub stop_tol: f64,
}

impl SolverConfig {
    pub fn new(step_size: f64, reg_weight: f64) -> Self {
        Self {
            step_size,
            reg_weight,
            max_iters: 2000,
            stop_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.step_size)));
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.reg_weight)));
        }
        if self.max_iters < 1 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.stop_tol >= 0.0) {
            return Err(Error::Config(format!("stop_tol {} must be >= 0", self.stop_tol)));
        }
        Ok(())
    }
}

fn check_problem(s: &[f64], z: &[f64], g: &DenseMatrix) -> Result<()> {
    if s.len() != g.cols() || z.len() != g.rows() {
        return Err(Error::Shape(format!(
            "s has length {}, z has length {}, G is {}x{}",
            s.len(),
            z.len(),
            g.rows(),
            g.cols()
        )));
    }
    Ok(())
}

/// One iteration: `soft(s - rho * G^T (G s - z), rho * lambda)`.
pub fn ista_step(s: &[f64], z: &[f64], g: &DenseMatrix, rho: f64, lambda: f64) -> Result<Vec<f64>> {
    check_problem(s, z, g)?;
    let mut resid = g.matvec(s)?;
    resid.iter_mut().zip(z).for_each(|(r, zi)| *r -= zi);
    let grad = g.matvec_t(&resid)?;
    let r: Vec<f64> = s.iter().zip(&grad).map(|(si, gi)| si - rho * gi).collect();
    soft_threshold(&r, Threshold::Scalar(rho * lambda))
}

/// `0.5 * |z - G s|^2 + lambda * |s|_1`.
pub fn objective(s: &[f64], z: &[f64], g: &DenseMatrix, lambda: f64) -> Result<f64> {
    check_problem(s, z, g)?;
    let gs = g.matvec(s)?;
    Ok(objective_from(&gs, s, z, lambda))
}

fn objective_from(gs: &[f64], s: &[f64], z: &[f64], lambda: f64) -> f64 {
    let data: f64 = gs.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * data + lambda * s.iter().map(|v| v.abs()).sum::<f64>()
}

#[derive(Clone, Debug)]
pub struct IstaResult {
    pub solution: Vec<f64>,
    /// Objective after each iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Column-sparse evaluation of `G s` through the rows of `G^T`.
fn sparse_product(gt: &DenseMatrix, s: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, sj) in s.iter().enumerate() {
        if *sj != 0.0 {
            for (o, g) in out.iter_mut().zip(gt.row(j)) {
                *o += sj * g;
            }
        }
    }
}

/// Runs ISTA from `s0` (zero if `None`) until the relative change drops below
/// `stop_tol` or `max_iters` is reached.
pub fn ista_solve(z: &[f64], g: &DenseMatrix, config: &SolverConfig, s0: Option<&[f64]>) -> Result<IstaResult> {
    let gt = g.transpose();
    ista_solve_with(z, g, &gt, config, s0)
}

/// [`ista_solve`] with a precomputed `G^T`, for repeated solves against one matrix.
pub fn ista_solve_with(
    z: &[f64],
    g: &DenseMatrix,
    gt: &DenseMatrix,
    config: &SolverConfig,
    s0: Option<&[f64]>,
) -> Result<IstaResult> {
    config.validate()?;
    let zero;
    let s0 = match s0 {
        Some(s) => s,
        None => {
            zero = vec![0.0; g.cols()];
            &zero
        }
    };
    check_problem(s0, z, g)?;
    if gt.rows() != g.cols() || gt.cols() != g.rows() {
        return Err(Error::Shape("G^T does not match G".into()));
    }
    let (rho, lambda) = (config.step_size, config.reg_weight);
    let thr = rho * lambda;
    let mut s = s0.to_vec();
    let mut next = vec![0.0; s.len()];
    let mut gs = g.matvec(&s)?;
    let mut resid = vec![0.0; z.len()];
    let mut trace = Vec::new();
    let mut prev_obj = objective_from(&gs, &s, z, lambda);
    let mut rising = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        resid.iter_mut().zip(gs.iter().zip(z)).for_each(|(r, (a, b))| *r = a - b);
        // next = s - rho * G^T resid
        next.copy_from_slice(&s);
        for (i, ri) in resid.iter().enumerate() {
            let f = -rho * ri;
            if f != 0.0 {
                for (n, gv) in next.iter_mut().zip(g.row(i)) {
                    *n += f * gv;
                }
            }
        }
        next.iter_mut().for_each(|v| *v = shrink(*v, thr));
        sparse_product(gt, &next, &mut gs);
        let obj = objective_from(&gs, &next, z, lambda);
        if !obj.is_finite() {
            return Err(Error::Divergence {
                iterations,
                step_size: rho,
                lambda,
            });
        }
        trace.push(obj);
        if obj > prev_obj {
            rising += 1;
            if rising == DIVERGENCE_RUN {
                return Err(Error::Divergence {
                    iterations,
                    step_size: rho,
                    lambda,
                });
            }
        } else {
            rising = 0;
        }
        prev_obj = obj;
        let change: f64 = s
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = norm2(&s).max(f64::EPSILON);
        std::mem::swap(&mut s, &mut next);
        if change / scale < config.stop_tol || change == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(IstaResult {
        solution: s,
        trace,
        iterations,
        converged,
    })
}

/// Largest step that guarantees monotone descent, `1 / sigma_max(G)^2`, from
/// power iteration on `G^T G`.
pub fn estimate_step_size(g: &DenseMatrix) -> Result<f64> {
    if g.data().iter().all(|v| *v == 0.0) {
        return Err(Error::Domain("steering matrix is zero".into()));
    }
    let n = g.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 97) as f64 / 97.0).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut estimate = 0.0;
    for _ in 0..50 {
        let w = g.matvec_t(&g.matvec(&v)?)?;
        let rayleigh: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let nw = norm2(&w);
        if nw == 0.0 {
            // start vector in the null space; any other direction will do
            v = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect();
            continue;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        let done = (rayleigh - estimate).abs() <= 1e-10 * rayleigh.abs();
        estimate = rayleigh;
        if done {
            break;
        }
    }
    if !(estimate > 0.0) {
        return Err(Error::Domain("power iteration found no positive singular value".into()));
    }
    Ok(1.0 / estimate)
}

/// `max |G^T z|`, the smallest lambda for which the lasso solution is zero.
pub fn lambda_scale(g: &DenseMatrix, z: &[f64]) -> Result<f64> {
    Ok(g.matvec_t(z)?.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// Ridge term added to `Z Z^T` before inversion.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Ridge {
    /// `1e-8 * trace(Z Z^T) / rows(Z)`.
    #[default]
    Auto,
    None,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearInit {
    /// `L x UV` map from measurements to high-resolution grids.
    pub q: DenseMatrix,
}

/// Least-squares map `Q = S Z^T (Z Z^T + eps I)^-1`, with measurements as the
/// columns of `z` and matching ground truths as the columns of `s`.
pub fn fit_linear_init(z: &DenseMatrix, s: &DenseMatrix, ridge: Ridge) -> Result<LinearInit> {
    if z.cols() != s.cols() {
        return Err(Error::Shape(format!(
            "Z has {} samples, S has {}",
            z.cols(),
            s.cols()
        )));
    }
    let zn = z.to_nalgebra();
    let sn = s.to_nalgebra();
    let mut gram = &zn * zn.transpose();
    let eps = match ridge {
        Ridge::Auto => 1e-8 * gram.trace() / z.rows().max(1) as f64,
        Ridge::None => 0.0,
        Ridge::Fixed(e) if e >= 0.0 => e,
        Ridge::Fixed(e) => return Err(Error::Config(format!("ridge {e} must be >= 0"))),
    };
    for i in 0..gram.nrows() {
        gram[(i, i)] += eps;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::LinAlg(format!(
            "Z Z^T + {eps:e} I is not positive definite ({} measurements, {} samples)",
            z.rows(),
            z.cols()
        ))
    })?;
    // Q^T = (Z Z^T + eps I)^-1 Z S^T
    let qt = chol.solve(&(&zn * sn.transpose()));
    let q = DenseMatrix::from_nalgebra(&qt.transpose());
    if q.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::LinAlg("linear initializer has non-finite entries".into()));
    }
    Ok(LinearInit { q })
}

/// `Q z`.
pub fn apply_init(init: &LinearInit, z: &[f64]) -> Result<Vec<f64>> {
    init.q.matvec(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_examples() {
        let out = soft_threshold(&[3.0, -0.5, -2.0], Threshold::Scalar(1.0)).unwrap();
        assert_eq!(out, vec![2.0, 0.0, -1.0]);
        let out = soft_threshold(&[-2.0], Threshold::Scalar(0.5)).unwrap();
        assert_eq!(out, vec![-1.5]);
        let out = soft_threshold(&[1.0, 1.0], Threshold::PerElement(&[0.25, 2.0])).unwrap();
        assert_eq!(out, vec![0.75, 0.0]);
    }

    #[test]
    fn negative_threshold_is_rejected() {
        assert!(matches!(
            soft_threshold(&[1.0], Threshold::Scalar(-0.1)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            soft_threshold(&[1.0, 2.0], Threshold::PerElement(&[0.1, -0.1])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn identity_step_sizes() {
        assert!((estimate_step_size(&DenseMatrix::identity(7)).unwrap() - 1.0).abs() < 1e-12);
        let two = DenseMatrix::identity(5).scaled(2.0);
        assert!((estimate_step_size(&two).unwrap() - 0.25).abs() < 1e-12);
        assert!(estimate_step_size(&DenseMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn zero_problem_stops_immediately() {
        let g = DenseMatrix::identity(4);
        let res = ista_solve(&[0.0; 4], &g, &SolverConfig::new(1.0, 0.1), None).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert!(res.solution.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oversized_step_diverges() {
        let g = DenseMatrix::identity(3).scaled(2.0);
        let err = ista_solve(&[1.0, 2.0, 3.0], &g, &SolverConfig::new(1.0, 0.0), None).unwrap_err();
        match err {
            Error::Divergence { iterations, lambda, .. } => {
                assert_eq!(iterations, DIVERGENCE_RUN);
                assert_eq!(lambda, 0.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn singular_gram_without_ridge_errors() {
        let z = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let s = DenseMatrix::identity(2);
        assert!(matches!(fit_linear_init(&z, &s, Ridge::None), Err(Error::LinAlg(_))));
        assert!(fit_linear_init(&z, &s, Ridge::Auto).is_ok());
    }
}
