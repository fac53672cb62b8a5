//! Reconstruction drivers shared by the command line and the end-to-end checks:
//! the ISTA baseline with its lambda search, the linear baseline, and scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dista::Model;
use crate::error::{Error, Result};
use crate::imaging::SteeringMatrix;
use crate::linalg::DenseMatrix;
use crate::metrics::{evaluate, EvalReport, EvalSample, DEFAULT_PEAK};
use crate::scenegen::{Record, SparseGridImage};
use crate::solvers::{
    apply_init, estimate_step_size, ista_solve_with, lambda_scale, LinearInit, SolverConfig, LAMBDA_GRID,
};

/// Iteration budget and stopping tolerance for every baseline solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IstaSettings {
    pub max_iters: usize,
    pub stop_tol: f64,
}

impl Default for IstaSettings {
    fn default() -> Self {
        let d = SolverConfig::new(1.0, 0.0);
        Self {
            max_iters: d.max_iters,
            stop_tol: d.stop_tol,
        }
    }
}

/// Solves every record with `lambda = factor * max|G^T z|`.
pub fn ista_reconstruct(
    records: &[Record],
    steering: &SteeringMatrix,
    factor: f64,
    settings: IstaSettings,
) -> Result<Vec<SparseGridImage>> {
    let g = &steering.matrix;
    let gt = g.transpose();
    let rho = estimate_step_size(g)?;
    records
        .par_iter()
        .map(|r| {
            let z = &r.observed.pixels;
            let cfg = SolverConfig {
                max_iters: settings.max_iters,
                stop_tol: settings.stop_tol,
                ..SolverConfig::new(rho, factor * lambda_scale(g, z)?)
            };
            let sol = ista_solve_with(z, g, &gt, &cfg, None)?;
            grid_like(&r.truth, sol.solution)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    /// Winning multiplier of `max|G^T z|`.
    pub factor: f64,
    /// `(factor, CSO-mAP)` for every grid point, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the lambda multiplier with the highest CSO-mAP on `records`. Ties go
/// to the smaller multiplier.
pub fn select_lambda(
    records: &[Record],
    steering: &SteeringMatrix,
    settings: IstaSettings,
    threshold: f64,
    pixel_width: f64,
) -> Result<LambdaSearch> {
    let mut scores = Vec::with_capacity(LAMBDA_GRID.len());
    for &factor in &LAMBDA_GRID {
        let preds = ista_reconstruct(records, steering, factor, settings)?;
        let report = score(records, &preds, threshold, pixel_width)?;
        log::info!("lambda factor {factor}: CSO-mAP {:.4}", report.cso_map);
        scores.push((factor, report.cso_map));
    }
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.1 > best.1 {
            best = *s;
        }
    }
    Ok(LambdaSearch { factor: best.0, scores })
}

/// Applies the linear initializer `Q z` to every record.
pub fn linear_reconstruct(records: &[Record], q: &DenseMatrix) -> Result<Vec<SparseGridImage>> {
    let init = LinearInit { q: q.clone() };
    records
        .iter()
        .map(|r| grid_like(&r.truth, apply_init(&init, &r.observed.pixels)?))
        .collect()
}

/// Runs the network on every record. Sequential: the model owns one graph.
pub fn model_reconstruct(records: &[Record], model: &mut Model) -> Result<Vec<SparseGridImage>> {
    records.iter().map(|r| model.infer(&r.observed.pixels)).collect()
}

pub fn score(records: &[Record], preds: &[SparseGridImage], threshold: f64, pixel_width: f64) -> Result<EvalReport> {
    if records.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} records",
            preds.len(),
            records.len()
        )));
    }
    let samples: Vec<EvalSample<'_>> = records
        .iter()
        .zip(preds)
        .map(|(r, p)| EvalSample {
            prediction: p,
            truth: &r.truth,
            targets: &r.targets,
        })
        .collect();
    evaluate(&samples, threshold, pixel_width, DEFAULT_PEAK)
}

fn grid_like(truth: &SparseGridImage, values: Vec<f64>) -> Result<SparseGridImage> {
    SparseGridImage::from_values(truth.width, truth.height, truth.factor, values)
}
