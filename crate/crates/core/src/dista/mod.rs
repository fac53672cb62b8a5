//! The unrolled dynamic ISTA network: model definition, training and inference.
//!
//! All tensors inside the network are in scaled units, intensities divided by
//! [`ModelConfig::intensity_scale`]; [`Model::infer`] converts back.

mod checkpoint;
pub mod network;
mod train;

use cso_autodiff::Tensor;

pub use checkpoint::{Checkpoint, EpochRecord, CHECKPOINT_VERSION};
pub use network::{
    build_network, dynamic_conv, dynamic_threshold, dynamic_transform, dynamic_weight,
    gradient_update, identity_branch, inverse_transform, param_name, stage_forward,
    ActivationCache, Context, LossNodes, ModelConfig, Network, StageNodes, StageParams, FC_WIDTH,
    STAGE_PARAM_NAMES,
};
pub use train::{fit_dataset_init, train, TrainOutcome, TrainStatus};

use crate::error::{Error, Result};
use crate::imaging::SteeringMatrix;
use crate::scenegen::SparseGridImage;

/// A checkpoint bound to a steering matrix, ready for repeated inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub checkpoint: Checkpoint,
    network: Network,
}

impl Model {
    /// Fails if the checkpoint was trained against a different steering matrix.
    pub fn new(checkpoint: Checkpoint, steering: &SteeringMatrix) -> Result<Self> {
        let found = steering.fingerprint();
        if found != checkpoint.fingerprint {
            return Err(Error::Fingerprint {
                expected: checkpoint.fingerprint.clone(),
                found,
            });
        }
        let (w, h) = checkpoint.grid;
        let network = build_network(
            &checkpoint.config,
            &steering.matrix,
            &checkpoint.q_init,
            w,
            h,
            &checkpoint.stages,
            false,
        )?;
        Ok(Self { checkpoint, network })
    }

    /// Runs the linear initialization and every stage on one measurement.
    pub fn infer(&mut self, z: &[f64]) -> Result<SparseGridImage> {
        let scale = self.checkpoint.config.intensity_scale;
        let uv = self.checkpoint.q_init.cols();
        if z.len() != uv {
            return Err(Error::Shape(format!("measurement of length {} for {uv} pixels", z.len())));
        }
        let zt = Tensor::new(&[uv, 1], z.iter().map(|v| v / scale).collect())?;
        self.network.graph.bind("z", &zt)?;
        self.network.graph.run()?;
        let out = self.network.graph.value(self.network.output);
        let (w, h) = self.checkpoint.grid;
        SparseGridImage::from_values(
            w,
            h,
            self.checkpoint.config.grid_factor,
            out.data().iter().map(|v| v * scale).collect(),
        )
    }

    pub fn network(&self) -> &Network {
        &self.network
    }
}
