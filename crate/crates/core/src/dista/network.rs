//! Graph construction for the unrolled network.

use cso_autodiff::{Graph, NodeId, Tensor};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::Rng;

/// Hidden width of the kernel-generating MLP.
pub const FC_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_stages: usize,
    pub channels: usize,
    pub grid_factor: usize,
    /// Weight of the per-stage identity constraint in the loss.
    pub gamma: f64,
    /// Mixing weight of the main branch; the dynamic branch gets `1 - alpha`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Intensities are divided by this before entering the network.
    pub intensity_scale: f64,
    /// Initial shrinkage applied to the main-branch features, in scaled units.
    pub init_threshold: f64,
    /// Std of the noise added to the structured kernel initialization.
    pub init_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_stages: 6,
            channels: 32,
            grid_factor: 3,
            gamma: 0.01,
            alpha: 0.7,
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 50,
            rng_seed: 0,
            intensity_scale: 255.0,
            init_threshold: 0.02,
            init_noise: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels < 1 {
            return bad("channels must be >= 1".into());
        }
        if self.grid_factor < 1 {
            return bad("grid_factor must be >= 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} must lie in [0, 1]", self.alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.intensity_scale > 0.0 && self.intensity_scale.is_finite()) {
            return bad(format!("intensity_scale {} must be positive", self.intensity_scale));
        }
        if !(self.init_threshold >= 0.0 && self.init_noise >= 0.0) {
            return bad("init_threshold and init_noise must be >= 0".into());
        }
        Ok(())
    }
}

/// Learnable tensors of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    /// `[C, 1, 3, 3]`
    pub conv_b: Tensor,
    /// `[C, C, 3, 3]`
    pub conv_a: Tensor,
    /// `[16, 1]`, `[16]`, `[9, 16]`, `[9]`
    pub dyn_fc1_w: Tensor,
    pub dyn_fc1_b: Tensor,
    pub dyn_fc2_w: Tensor,
    pub dyn_fc2_b: Tensor,
    /// `[C, C, 3, 3]` with `[C]` biases
    pub thr_conv1_w: Tensor,
    pub thr_conv1_b: Tensor,
    pub thr_conv2_w: Tensor,
    pub thr_conv2_b: Tensor,
    /// `[C, 2, 3, 3]`, `[C]`
    pub thr_mask_w: Tensor,
    pub thr_mask_b: Tensor,
    /// `[C, C, 3, 3]`, `[C]`
    pub thr_out_w: Tensor,
    pub thr_out_b: Tensor,
    /// `[C, C, 3, 3]`
    pub inv_conv_a: Tensor,
    /// `[1, C, 3, 3]`
    pub inv_conv_b: Tensor,
    /// `[1]`
    pub rho: Tensor,
    /// `[1]`; the shrinkage floor is `softplus(theta_base)`.
    pub theta_base: Tensor,
}

pub const STAGE_PARAM_NAMES: [&str; 18] = [
    "conv_b",
    "conv_a",
    "dyn_fc1_w",
    "dyn_fc1_b",
    "dyn_fc2_w",
    "dyn_fc2_b",
    "thr_conv1_w",
    "thr_conv1_b",
    "thr_conv2_w",
    "thr_conv2_b",
    "thr_mask_w",
    "thr_mask_b",
    "thr_out_w",
    "thr_out_b",
    "inv_conv_a",
    "inv_conv_b",
    "rho",
    "theta_base",
];

pub fn param_name(stage: usize, field: &str) -> String {
    format!("stage{stage}.{field}")
}

fn inverse_softplus(v: f64) -> f64 {
    // ln(e^v - 1), stable for small and large v
    v + (-(-v).exp_m1()).ln()
}

impl StageParams {
    pub fn tensors(&self) -> [&Tensor; 18] {
        [
            &self.conv_b,
            &self.conv_a,
            &self.dyn_fc1_w,
            &self.dyn_fc1_b,
            &self.dyn_fc2_w,
            &self.dyn_fc2_b,
            &self.thr_conv1_w,
            &self.thr_conv1_b,
            &self.thr_conv2_w,
            &self.thr_conv2_b,
            &self.thr_mask_w,
            &self.thr_mask_b,
            &self.thr_out_w,
            &self.thr_out_b,
            &self.inv_conv_a,
            &self.inv_conv_b,
            &self.rho,
            &self.theta_base,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 18] {
        [
            &mut self.conv_b,
            &mut self.conv_a,
            &mut self.dyn_fc1_w,
            &mut self.dyn_fc1_b,
            &mut self.dyn_fc2_w,
            &mut self.dyn_fc2_b,
            &mut self.thr_conv1_w,
            &mut self.thr_conv1_b,
            &mut self.thr_conv2_w,
            &mut self.thr_conv2_b,
            &mut self.thr_mask_w,
            &mut self.thr_mask_b,
            &mut self.thr_out_w,
            &mut self.thr_out_b,
            &mut self.inv_conv_a,
            &mut self.inv_conv_b,
            &mut self.rho,
            &mut self.theta_base,
        ]
    }

    /// Structured start: the main branch and its inverse pass nonnegative
    /// signals through unchanged, the shrinkage floor cancels the resting
    /// output of the dynamic branch plus `init_threshold`, and every other
    /// weight is small noise. An untrained stage is close to one nonnegative
    /// ISTA step with threshold `init_threshold`.
    pub fn init(config: &ModelConfig, rho: f64, rng: &mut Rng) -> Self {
        let c = config.channels;
        let sd = config.init_noise;
        let mut noise = |shape: &[usize], scale: f64| {
            Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let delta = |t: &mut Tensor, co: usize, ci: usize, cin: usize, v: f64| {
            t.data_mut()[(co * cin + ci) * 9 + 4] += v;
        };
        let mut conv_b = noise(&[c, 1, 3, 3], sd);
        let mut conv_a = noise(&[c, c, 3, 3], sd);
        let mut inv_conv_a = noise(&[c, c, 3, 3], sd);
        let mut inv_conv_b = noise(&[1, c, 3, 3], sd);
        for k in 0..c {
            delta(&mut conv_b, k, 0, 1, 1.0);
            delta(&mut conv_a, k, k, c, 1.0);
            delta(&mut inv_conv_a, k, k, c, 1.0);
            delta(&mut inv_conv_b, 0, k, c, 1.0 / (config.alpha.max(1e-3) * c as f64));
        }
        let resting = (1.0 - config.alpha) * 0.5;
        let floor = resting + config.alpha * config.init_threshold;
        Self {
            conv_b,
            conv_a,
            dyn_fc1_w: noise(&[FC_WIDTH, 1], 0.1),
            dyn_fc1_b: Tensor::zeros(&[FC_WIDTH]),
            dyn_fc2_w: noise(&[9, FC_WIDTH], sd),
            dyn_fc2_b: Tensor::zeros(&[9]),
            thr_conv1_w: noise(&[c, c, 3, 3], 0.1),
            thr_conv1_b: Tensor::zeros(&[c]),
            thr_conv2_w: noise(&[c, c, 3, 3], 0.1),
            thr_conv2_b: Tensor::zeros(&[c]),
            thr_mask_w: noise(&[c, 2, 3, 3], 0.1),
            thr_mask_b: Tensor::zeros(&[c]),
            thr_out_w: noise(&[c, c, 3, 3], sd),
            thr_out_b: Tensor::zeros(&[c]),
            inv_conv_a,
            inv_conv_b,
            rho: Tensor::scalar(rho),
            theta_base: Tensor::scalar(inverse_softplus(floor.max(1e-6))),
        }
    }

    pub fn from_tensors(mut list: Vec<Tensor>) -> Result<Self> {
        if list.len() != 18 {
            return Err(Error::Shape(format!("{} stage tensors, expected 18", list.len())));
        }
        let mut it = list.drain(..);
        let mut next = || it.next().expect("length checked");
        Ok(Self {
            conv_b: next(),
            conv_a: next(),
            dyn_fc1_w: next(),
            dyn_fc1_b: next(),
            dyn_fc2_w: next(),
            dyn_fc2_b: next(),
            thr_conv1_w: next(),
            thr_conv1_b: next(),
            thr_conv2_w: next(),
            thr_conv2_b: next(),
            thr_mask_w: next(),
            thr_mask_b: next(),
            thr_out_w: next(),
            thr_out_b: next(),
            inv_conv_a: next(),
            inv_conv_b: next(),
            rho: next(),
            theta_base: next(),
        })
    }
}

/// Node ids of one stage's parameters.
#[derive(Clone, Debug)]
pub struct StageNodes {
    pub conv_b: NodeId,
    pub conv_a: NodeId,
    pub dyn_fc1_w: NodeId,
    pub dyn_fc1_b: NodeId,
    pub dyn_fc2_w: NodeId,
    pub dyn_fc2_b: NodeId,
    pub thr_conv1_w: NodeId,
    pub thr_conv1_b: NodeId,
    pub thr_conv2_w: NodeId,
    pub thr_conv2_b: NodeId,
    pub thr_mask_w: NodeId,
    pub thr_mask_b: NodeId,
    pub thr_out_w: NodeId,
    pub thr_out_b: NodeId,
    pub inv_conv_a: NodeId,
    pub inv_conv_b: NodeId,
    pub rho: NodeId,
    pub theta_base: NodeId,
}

impl StageNodes {
    pub fn declare(g: &mut Graph, stage: usize, p: &StageParams) -> Result<Self> {
        let t = p.tensors();
        let mut ids = Vec::with_capacity(18);
        for (name, tensor) in STAGE_PARAM_NAMES.iter().zip(t) {
            ids.push(g.param(&param_name(stage, name), tensor.clone())?);
        }
        Ok(Self {
            conv_b: ids[0],
            conv_a: ids[1],
            dyn_fc1_w: ids[2],
            dyn_fc1_b: ids[3],
            dyn_fc2_w: ids[4],
            dyn_fc2_b: ids[5],
            thr_conv1_w: ids[6],
            thr_conv1_b: ids[7],
            thr_conv2_w: ids[8],
            thr_conv2_b: ids[9],
            thr_mask_w: ids[10],
            thr_mask_b: ids[11],
            thr_out_w: ids[12],
            thr_out_b: ids[13],
            inv_conv_a: ids[14],
            inv_conv_b: ids[15],
            rho: ids[16],
            theta_base: ids[17],
        })
    }
}

/// Shared, non-trainable tensors every stage reads.
#[derive(Clone, Copy, Debug)]
pub struct Context {
    pub g: NodeId,
    pub gt: NodeId,
    /// `[C, H, W]` of ones for broadcasting the scalar threshold floor.
    pub ones: NodeId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
}

impl Context {
    pub fn declare(g: &mut Graph, steering: &DenseMatrix, channels: usize, width: usize, height: usize, alpha: f64) -> Result<Self> {
        if steering.cols() != width * height {
            return Err(Error::Shape(format!(
                "steering matrix has {} columns for a {width}x{height} grid",
                steering.cols()
            )));
        }
        let gm = Tensor::new(&[steering.rows(), steering.cols()], steering.data().to_vec())?;
        let gt = steering.transpose();
        let gtm = Tensor::new(&[gt.rows(), gt.cols()], gt.data().to_vec())?;
        Ok(Self {
            g: g.constant("G", gm)?,
            gt: g.constant("G^T", gtm)?,
            ones: g.constant("ones", Tensor::ones(&[channels, height, width]))?,
            channels,
            height,
            width,
            alpha,
        })
    }

    fn grid(&self) -> [usize; 3] {
        [1, self.height, self.width]
    }

    fn flat(&self) -> [usize; 2] {
        [self.height * self.width, 1]
    }
}

/// Intermediate nodes of one stage; their values are readable after a forward pass.
#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub r: NodeId,
    pub w: NodeId,
    pub w_r: NodeId,
    pub main: NodeId,
    pub aux: NodeId,
    pub features: NodeId,
    pub u1: NodeId,
    pub u2: NodeId,
    pub u: NodeId,
    pub sa_avg: NodeId,
    pub sa_max: NodeId,
    pub sa_hat: NodeId,
    pub sa_mask: NodeId,
    pub theta_d: NodeId,
    pub theta: NodeId,
    pub shrunk: NodeId,
    /// `[L, 1]`
    pub output: NodeId,
}

/// `r = s - rho * G^T (G s - z)` on flat `[L, 1]` and `[UV, 1]` columns; the
/// result is reshaped to `[1, H, W]`.
pub fn gradient_update(g: &mut Graph, ctx: &Context, s_prev: NodeId, z: NodeId, rho: NodeId) -> Result<NodeId> {
    let gs = g.matmul(ctx.g, s_prev)?;
    let resid = g.sub(gs, z)?;
    let grad = g.matmul(ctx.gt, resid)?;
    let step = g.scalar_mul(rho, grad)?;
    let r = g.sub(s_prev, step)?;
    Ok(g.reshape(r, &ctx.grid())?)
}

/// Mean-pool the grid to one value, then `FC(16) -> relu -> FC(9)` into a
/// `[1, 1, 3, 3]` kernel.
pub fn dynamic_weight(g: &mut Graph, ctx: &Context, s_prev_img: NodeId, p: &StageNodes) -> Result<NodeId> {
    let total = g.sum(s_prev_img)?;
    let mean = g.scale(total, 1.0 / (ctx.height * ctx.width) as f64)?;
    let h = g.linear(mean, p.dyn_fc1_w, Some(p.dyn_fc1_b))?;
    let h = g.relu(h)?;
    let w = g.linear(h, p.dyn_fc2_w, Some(p.dyn_fc2_b))?;
    Ok(g.reshape(w, &[1, 1, 3, 3])?)
}

/// Convolution of `r` with the generated kernel.
pub fn dynamic_conv(g: &mut Graph, w: NodeId, r: NodeId) -> Result<NodeId> {
    Ok(g.conv2d(r, w, None)?)
}

/// `alpha * A(relu(B(r))) + (1 - alpha) * sigmoid(w_r)`, the second term copied
/// across channels. Returns `(features, main, aux, W, w_r)`.
pub fn dynamic_transform(
    g: &mut Graph,
    ctx: &Context,
    r: NodeId,
    s_prev_img: NodeId,
    p: &StageNodes,
) -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId)> {
    let b = g.conv2d(r, p.conv_b, None)?;
    let b = g.relu(b)?;
    let main = g.conv2d(b, p.conv_a, None)?;
    let w = dynamic_weight(g, ctx, s_prev_img, p)?;
    let w_r = dynamic_conv(g, w, r)?;
    let sig = g.sigmoid(w_r)?;
    let aux = g.concat(&vec![sig; ctx.channels])?;
    let a = g.scale(main, ctx.alpha)?;
    let bb = g.scale(aux, 1.0 - ctx.alpha)?;
    let features = g.add(a, bb)?;
    Ok((features, main, aux, w, w_r))
}

/// Spatially adaptive threshold map, nonnegative by construction.
/// Returns `(theta_d, u1, u2, u, sa_avg, sa_max, sa_hat, sa_mask)`.
#[allow(clippy::type_complexity)]
pub fn dynamic_threshold(
    g: &mut Graph,
    features: NodeId,
    p: &StageNodes,
) -> Result<(NodeId, NodeId, NodeId, NodeId, NodeId, NodeId, NodeId, NodeId)> {
    let u1 = g.conv2d(features, p.thr_conv1_w, Some(p.thr_conv1_b))?;
    let u2 = g.conv2d(features, p.thr_conv2_w, Some(p.thr_conv2_b))?;
    let u = g.concat(&[u1, u2])?;
    let sa_avg = g.channel_mean(u)?;
    let sa_max = g.channel_max(u)?;
    let pooled = g.concat(&[sa_avg, sa_max])?;
    let sa_hat = g.conv2d(pooled, p.thr_mask_w, Some(p.thr_mask_b))?;
    let sa_mask = g.sigmoid(sa_hat)?;
    let m1 = g.mul(sa_mask, u1)?;
    let m2 = g.mul(sa_mask, u2)?;
    let comb = g.add(m1, m2)?;
    let out = g.conv2d(comb, p.thr_out_w, Some(p.thr_out_b))?;
    let theta_d = g.relu(out)?;
    Ok((theta_d, u1, u2, u, sa_avg, sa_max, sa_hat, sa_mask))
}

/// `inv_conv_b(relu(inv_conv_a(x)))`, `C` channels down to one.
pub fn inverse_transform(g: &mut Graph, x: NodeId, p: &StageNodes) -> Result<NodeId> {
    let a = g.conv2d(x, p.inv_conv_a, None)?;
    let a = g.relu(a)?;
    Ok(g.conv2d(a, p.inv_conv_b, None)?)
}

/// One full stage from `s_prev` (`[L, 1]`) to the next estimate.
pub fn stage_forward(g: &mut Graph, ctx: &Context, s_prev: NodeId, z: NodeId, p: &StageNodes) -> Result<ActivationCache> {
    let r = gradient_update(g, ctx, s_prev, z, p.rho)?;
    let s_img = g.reshape(s_prev, &ctx.grid())?;
    let (features, main, aux, w, w_r) = dynamic_transform(g, ctx, r, s_img, p)?;
    let (theta_d, u1, u2, u, sa_avg, sa_max, sa_hat, sa_mask) = dynamic_threshold(g, features, p)?;
    let floor = g.softplus(p.theta_base)?;
    let floor = g.scalar_mul(floor, ctx.ones)?;
    let theta = g.add(theta_d, floor)?;
    let shrunk = g.soft_threshold(features, theta)?;
    let out = inverse_transform(g, shrunk, p)?;
    let output = g.reshape(out, &ctx.flat())?;
    Ok(ActivationCache {
        r,
        w,
        w_r,
        main,
        aux,
        features,
        u1,
        u2,
        u,
        sa_avg,
        sa_max,
        sa_hat,
        sa_mask,
        theta_d,
        theta,
        shrunk,
        output,
    })
}

/// `F~(F_d(s))` with the dynamic branch conditioned on `s` itself; `s_img` is `[1, H, W]`.
pub fn identity_branch(g: &mut Graph, ctx: &Context, s_img: NodeId, p: &StageNodes) -> Result<NodeId> {
    let (features, ..) = dynamic_transform(g, ctx, s_img, s_img, p)?;
    inverse_transform(g, features, p)
}

/// Node handles of a built network.
#[derive(Clone, Debug)]
pub struct Network {
    pub graph: Graph,
    pub z: NodeId,
    pub init: NodeId,
    pub stages: Vec<ActivationCache>,
    pub output: NodeId,
    /// Present on training graphs.
    pub loss: Option<LossNodes>,
}

#[derive(Clone, Debug)]
pub struct LossNodes {
    pub truth: NodeId,
    pub total: NodeId,
    pub discrepancy: NodeId,
    pub constraint: Option<NodeId>,
    pub identities: Vec<NodeId>,
}

/// Builds the unrolled network. With `with_loss`, a `truth` input and the
/// per-sample loss `mse(s_N, s) + gamma * sum_k mse(F~_k(F_d,k(s)), s)` are added.
pub fn build_network(
    config: &ModelConfig,
    steering: &DenseMatrix,
    q_init: &DenseMatrix,
    width: usize,
    height: usize,
    stages: &[StageParams],
    with_loss: bool,
) -> Result<Network> {
    let mut g = Graph::new();
    let (l, uv) = (width * height, steering.rows());
    if q_init.rows() != l || q_init.cols() != uv {
        return Err(Error::Shape(format!(
            "linear initializer is {}x{}, expected {l}x{uv}",
            q_init.rows(),
            q_init.cols()
        )));
    }
    let ctx = Context::declare(&mut g, steering, config.channels, width, height, config.alpha)?;
    let q = g.constant("Q_init", Tensor::new(&[l, uv], q_init.data().to_vec())?)?;
    let z = g.input("z", &[uv, 1])?;
    let init = g.matmul(q, z)?;
    let mut nodes = Vec::with_capacity(stages.len());
    for (k, p) in stages.iter().enumerate() {
        nodes.push(StageNodes::declare(&mut g, k, p)?);
    }
    let mut s = init;
    let mut caches = Vec::with_capacity(stages.len());
    for p in &nodes {
        let cache = stage_forward(&mut g, &ctx, s, z, p)?;
        s = cache.output;
        caches.push(cache);
    }
    g.set_name(s, "output")?;
    g.mark_output("output", s);
    let loss = if with_loss {
        let truth = g.input("truth", &[l, 1])?;
        let discrepancy = g.mse(s, truth)?;
        let truth_img = g.reshape(truth, &[1, height, width])?;
        let mut identities = Vec::new();
        let mut constraint: Option<NodeId> = None;
        for p in &nodes {
            let id = identity_branch(&mut g, &ctx, truth_img, p)?;
            let e = g.mse(id, truth_img)?;
            identities.push(id);
            constraint = Some(match constraint {
                None => e,
                Some(c) => g.add(c, e)?,
            });
        }
        let total = match constraint {
            Some(c) => {
                let w = g.scale(c, config.gamma)?;
                g.add(discrepancy, w)?
            }
            None => discrepancy,
        };
        g.set_name(total, "loss")?;
        g.mark_output("loss", total);
        g.mark_output("discrepancy", discrepancy);
        if let Some(c) = constraint {
            g.set_name(c, "constraint")?;
            g.mark_output("constraint", c);
        }
        Some(LossNodes {
            truth,
            total,
            discrepancy,
            constraint,
            identities,
        })
    } else {
        None
    };
    Ok(Network {
        graph: g,
        z,
        init,
        stages: caches,
        output: s,
        loss,
    })
}
