//! Dense-tensor reverse-mode automatic differentiation.
//!
//! The engine supports exactly the operations an unfolded shrinkage network needs:
//! elementwise arithmetic, matrix products, same-size 2-D convolution,
//! fully-connected layers, relu/sigmoid/softplus, a two-argument soft-threshold,
//! channel concatenation and pooling, and sum/MSE reductions. Everything is `f64`
//! and single-threaded per graph.
//!
//! ```
//! use cso_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input("x", &[1]).unwrap();
//! let y = g.mul(x, x).unwrap();
//! g.forward(&[("x", &Tensor::scalar(3.0))]).unwrap();
//! assert_eq!(g.value(y).item(), 9.0);
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

mod adam;
mod check;
mod error;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use check::{grad_check, relative_error, GradCheck, GRAD_FLOOR};
pub use error::{GraphError, OptimError};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
