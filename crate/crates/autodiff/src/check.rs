//! Central finite-difference gradient checking.

use crate::error::GraphError;
use crate::graph::{Graph, NodeId};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Node name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const GRAD_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares backward gradients of `sum(output)` against central differences with
/// step `h` over every coordinate of every trainable parameter and every input.
///
/// The graph must have been evaluated; its bindings are left as they were.
pub fn grad_check(graph: &mut Graph, output: NodeId, h: f64) -> Result<GradCheck, GraphError> {
    graph.backward(output)?;
    let mut probes: Vec<NodeId> = graph.params().map(|(id, _, _)| id).collect();
    probes.extend(graph.inputs().filter(|id| graph.needs_grad(*id)));
    probes.sort();

    let analytic: Vec<(NodeId, Vec<f64>)> = probes
        .iter()
        .map(|id| {
            let g = graph
                .grad(*id)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; graph.value(*id).len()]);
            (*id, g)
        })
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (id, grad) in analytic {
        debug_assert!(graph.is_trainable_param(id) || graph.kind(id) == "input");
        for (k, a) in grad.iter().enumerate() {
            let orig = graph.value(id).data()[k];
            graph.value_mut(id).data_mut()[k] = orig + h;
            graph.run()?;
            let plus: f64 = graph.value(output).data().iter().sum();
            graph.value_mut(id).data_mut()[k] = orig - h;
            graph.run()?;
            let minus: f64 = graph.value(output).data().iter().sum();
            graph.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(*a, numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((graph.name(id).to_string(), k));
            }
        }
    }
    graph.run()?;
    Ok(report)
}
