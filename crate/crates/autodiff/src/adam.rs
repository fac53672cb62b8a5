//! Adaptive moment estimation.

use std::collections::HashMap;

use crate::error::OptimError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam step over named parameters. `grads` must hold an
/// entry of matching shape for every parameter. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_update(
    params: &mut [(String, Tensor)],
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), OptimError> {
    let lookup: HashMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    for (name, p) in params.iter() {
        let g = lookup
            .get(name.as_str())
            .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.clone(),
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(OptimError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = lookup[name.as_str()];
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= config.lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> Vec<(String, Tensor)> {
        vec![(name.to_string(), Tensor::scalar(v))]
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one("w", 1.5);
        let mut st = AdamState::new();
        for _ in 0..10 {
            adam_update(&mut p, &one("w", 0.0), &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p[0].1.item(), 1.5);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = one("w", 0.0);
        let mut st = AdamState::new();
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..2000 {
            adam_update(&mut p, &one("w", 3.0), &mut st, &cfg).unwrap();
            let now = p[0].1.item();
            step = last - now;
            last = now;
        }
        assert!((step - cfg.lr).abs() < 1e-6 * cfg.lr.max(1.0), "step {step}");
    }

    #[test]
    fn quadratic_loss_decreases_monotonically() {
        // loss = (w - 2)^2
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = one("w", 20.0);
        let mut st = AdamState::new();
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let w = p[0].1.item();
            let loss = (w - 2.0) * (w - 2.0);
            assert!(loss < prev, "loss went up: {loss} >= {prev}");
            prev = loss;
            adam_update(&mut p, &one("w", 2.0 * (w - 2.0)), &mut st, &cfg).unwrap();
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("stage0.rho", 1.0);
        let err = adam_update(
            &mut p,
            &one("stage0.rho", f64::NAN),
            &mut AdamState::new(),
            &AdamConfig::default(),
        )
        .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("stage0.rho".into()));
        assert_eq!(p[0].1.item(), 1.0);
    }
}
