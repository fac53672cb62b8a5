//! Simulation, sparse-recovery baselines, an unrolled learned solver and
//! evaluation metrics for unmixing closely-spaced point targets on a small
//! infrared focal plane.

pub mod dista;
pub mod error;
pub mod imaging;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scenegen;
pub mod solvers;

pub use error::{Error, Result};
