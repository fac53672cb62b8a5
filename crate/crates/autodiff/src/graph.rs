//! Static computation graph with cached forward values and reverse-mode gradients.
//!
//! Nodes are appended in construction order, which is also a topological order:
//! every op can only reference nodes that already exist. A graph is built once and
//! then evaluated many times with fresh input bindings.

use std::collections::{BTreeMap, HashMap};

use crate::error::GraphError;
use crate::kernels::{self, ConvDims};
use crate::tensor::{numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScalarMul { scalar: NodeId, x: NodeId },
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    },
    Linear {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    SoftThreshold { x: NodeId, theta: NodeId },
    Concat(Vec<NodeId>),
    ChannelMean(NodeId),
    ChannelMax(NodeId),
    Sum(NodeId),
    Mse(NodeId, NodeId),
    Reshape(NodeId),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::SoftThreshold { .. } => "soft_threshold",
            Op::Concat(_) => "concat",
            Op::ChannelMean(_) => "channel_mean",
            Op::ChannelMax(_) => "channel_max",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::Reshape(_) => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    op: Op,
    shape: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
    trainable: bool,
    // argmax indices for channel max
    aux: Vec<u32>,
}

/// A differentiable computation graph.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    by_name: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    bound: Vec<bool>,
    evaluated: bool,
    grads: Vec<Tensor>,
    grad_live: Vec<bool>,
    col: Vec<f64>,
    fault: Option<(NodeId, f64)>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: Option<String>,
        op: Op,
        shape: Vec<usize>,
        value: Tensor,
        trainable: bool,
    ) -> Result<NodeId, GraphError> {
        let id = NodeId(self.nodes.len());
        let name = name.unwrap_or_else(|| format!("{}#{}", op.kind(), id.0));
        if self.by_name.contains_key(&name) {
            return Err(GraphError::DuplicateName(name));
        }
        let needs_grad = match &op {
            Op::Input => true,
            Op::Param => trainable,
            Op::Constant => false,
            _ => self.parents_of(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.by_name.insert(name.clone(), id);
        self.nodes.push(Node {
            name,
            op,
            shape,
            value,
            needs_grad,
            trainable,
            aux: Vec::new(),
        });
        self.bound.push(false);
        self.evaluated = false;
        Ok(id)
    }

    fn parents_of(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Input | Op::Param | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::ChannelMean(a)
            | Op::ChannelMax(a)
            | Op::Sum(a)
            | Op::Reshape(a) => vec![*a],
            Op::ScalarMul { scalar, x } => vec![*scalar, *x],
            Op::Conv2d { x, kernel, bias } => {
                let mut v = vec![*x, *kernel];
                v.extend(bias);
                v
            }
            Op::Linear { x, weight, bias } => {
                let mut v = vec![*x, *weight];
                v.extend(bias);
                v
            }
            Op::SoftThreshold { x, theta } => vec![*x, *theta],
            Op::Concat(list) => list.clone(),
        }
    }

    fn shape_err(&self, kind: &str, detail: String) -> GraphError {
        GraphError::Shape {
            node: format!("{kind}#{}", self.nodes.len()),
            detail,
        }
    }

    fn sh(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    // ----- leaves -----

    /// Declares an input bound at forward time. Inputs receive gradients.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.push(
            Some(name.to_string()),
            Op::Input,
            shape.to_vec(),
            Tensor::zeros(shape),
            false,
        )
    }

    /// Declares a trainable parameter with an initial value.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        let shape = value.shape().to_vec();
        self.push(Some(name.to_string()), Op::Param, shape, value, true)
    }

    /// Declares a fixed tensor that never receives a gradient.
    pub fn constant(&mut self, name: &str, value: Tensor) -> Result<NodeId, GraphError> {
        let shape = value.shape().to_vec();
        self.push(Some(name.to_string()), Op::Constant, shape, value, false)
    }

    // ----- ops -----

    fn same_shape(&self, kind: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>, GraphError> {
        if self.sh(a) != self.sh(b) {
            return Err(self.shape_err(
                kind,
                format!("operands {:?} and {:?}", self.sh(a), self.sh(b)),
            ));
        }
        Ok(self.sh(a).to_vec())
    }

    fn op(&mut self, op: Op, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let value = Tensor::zeros(&shape);
        self.push(None, op, shape, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("add", a, b)?;
        self.op(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("sub", a, b)?;
        self.op(Op::Sub(a, b), s)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("mul", a, b)?;
        self.op(Op::Mul(a, b), s)
    }

    /// Multiplication by a fixed constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, GraphError> {
        if !factor.is_finite() {
            return Err(GraphError::NonFinite {
                context: "scale factor".into(),
            });
        }
        let s = self.sh(a).to_vec();
        self.op(Op::Scale(a, factor), s)
    }

    /// Single-element node times a tensor; the only broadcast the engine allows.
    pub fn scalar_mul(&mut self, scalar: NodeId, x: NodeId) -> Result<NodeId, GraphError> {
        if numel(self.sh(scalar)) != 1 {
            return Err(self.shape_err(
                "scalar_mul",
                format!("scalar operand has shape {:?}", self.sh(scalar)),
            ));
        }
        let s = self.sh(x).to_vec();
        self.op(Op::ScalarMul { scalar, x }, s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (sa, sb) = (self.sh(a), self.sh(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let s = vec![sa[0], sb[1]];
        self.op(Op::MatMul(a, b), s)
    }

    /// Stride-1 cross-correlation with zero padding that preserves the spatial
    /// size. `x` is `[Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]` with odd
    /// kernel sides, `bias` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let (sx, sk) = (self.sh(x).to_vec(), self.sh(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] || sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(self.shape_err(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sk:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.sh(b) != [sk[0]] {
                return Err(self.shape_err(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.sh(b), sk[0]),
                ));
            }
        }
        self.op(Op::Conv2d { x, kernel, bias }, vec![sk[0], sx[1], sx[2]])
    }

    /// Fully-connected layer: `weight` is `[out, in]`, `x` is `[in]`.
    pub fn linear(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, GraphError> {
        let (sx, sw) = (self.sh(x).to_vec(), self.sh(weight).to_vec());
        if sx.len() != 1 || sw.len() != 2 || sw[1] != sx[0] {
            return Err(self.shape_err(
                "linear",
                format!("input {sx:?} incompatible with weight {sw:?}"),
            ));
        }
        if let Some(b) = bias {
            if self.sh(b) != [sw[0]] {
                return Err(self.shape_err("linear", format!("bias {:?}", self.sh(b))));
            }
        }
        self.op(Op::Linear { x, weight, bias }, vec![sw[0]])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.sh(x).to_vec();
        self.op(Op::Relu(x), s)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.sh(x).to_vec();
        self.op(Op::Sigmoid(x), s)
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.sh(x).to_vec();
        self.op(Op::Softplus(x), s)
    }

    /// `sign(x) * max(|x| - theta, 0)` with an elementwise, nonnegative `theta`.
    pub fn soft_threshold(&mut self, x: NodeId, theta: NodeId) -> Result<NodeId, GraphError> {
        let s = self.same_shape("soft_threshold", x, theta)?;
        self.op(Op::SoftThreshold { x, theta }, s)
    }

    /// Concatenation along the leading (channel) axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        let Some(first) = parts.first() else {
            return Err(self.shape_err("concat", "no operands".into()));
        };
        let tail = self.sh(*first)[1..].to_vec();
        let mut lead = 0;
        for p in parts {
            let s = self.sh(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.shape_err(
                    "concat",
                    format!("operand {:?} does not match trailing dims {tail:?}", s),
                ));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.op(Op::Concat(parts.to_vec()), shape)
    }

    pub fn channel_mean(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.channel_pool_shape("channel_mean", x)?;
        self.op(Op::ChannelMean(x), s)
    }

    /// Per-position maximum across channels; ties go to the lowest channel.
    pub fn channel_max(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        let s = self.channel_pool_shape("channel_max", x)?;
        self.op(Op::ChannelMax(x), s)
    }

    fn channel_pool_shape(&self, kind: &str, x: NodeId) -> Result<Vec<usize>, GraphError> {
        let s = self.sh(x);
        if s.len() != 3 {
            return Err(self.shape_err(kind, format!("expected [C, H, W], got {s:?}")));
        }
        Ok(vec![1, s[1], s[2]])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.op(Op::Sum(x), vec![1])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.same_shape("mse", a, b)?;
        self.op(Op::Mse(a, b), vec![1])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        if numel(shape) != numel(self.sh(x)) {
            return Err(self.shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.sh(x)),
            ));
        }
        self.op(Op::Reshape(x), shape.to_vec())
    }

    // ----- naming and lookup -----

    /// Renames a node; op nodes get `kind#index` names by default.
    pub fn set_name(&mut self, id: NodeId, name: &str) -> Result<(), GraphError> {
        if let Some(other) = self.by_name.get(name) {
            if *other != id {
                return Err(GraphError::DuplicateName(name.to_string()));
            }
            return Ok(());
        }
        let old = std::mem::replace(&mut self.nodes[id.0].name, name.to_string());
        self.by_name.remove(&old);
        self.by_name.insert(name.to_string(), id);
        Ok(())
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn kind(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.kind()
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (NodeId, &str, &Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param) && n.trainable)
            .map(|(i, n)| (NodeId(i), n.name.as_str(), &n.value))
    }

    pub(crate) fn inputs(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input))
            .map(|(i, _)| NodeId(i))
    }

    /// Overwrites a parameter or constant value; the shape must match.
    pub fn set_value(&mut self, name: &str, value: &Tensor) -> Result<(), GraphError> {
        let id = self
            .node(name)
            .ok_or_else(|| GraphError::UnknownParam(name.to_string()))?;
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Param | Op::Constant) {
            return Err(GraphError::UnknownParam(name.to_string()));
        }
        if node.shape != value.shape() {
            return Err(GraphError::Shape {
                node: name.to_string(),
                detail: format!("expected {:?}, got {:?}", node.shape, value.shape()),
            });
        }
        node.value.data_mut().copy_from_slice(value.data());
        self.evaluated = false;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, id: NodeId) -> &mut Tensor {
        self.evaluated = false;
        &mut self.nodes[id.0].value
    }

    /// Cached value of a node. Meaningful after [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    // ----- evaluation -----

    /// Binds an input by name (copying the data).
    pub fn bind(&mut self, name: &str, value: &Tensor) -> Result<(), GraphError> {
        let id = self
            .node(name)
            .filter(|id| matches!(self.nodes[id.0].op, Op::Input))
            .ok_or_else(|| GraphError::UnknownInput(name.to_string()))?;
        let node = &mut self.nodes[id.0];
        if node.shape != value.shape() {
            return Err(GraphError::Shape {
                node: name.to_string(),
                detail: format!("input declared {:?}, bound {:?}", node.shape, value.shape()),
            });
        }
        if !value.is_finite() {
            return Err(GraphError::NonFinite {
                context: format!("input `{name}`"),
            });
        }
        node.value.data_mut().copy_from_slice(value.data());
        self.bound[id.0] = true;
        self.evaluated = false;
        Ok(())
    }

    /// Binds `inputs` and evaluates every node; returns the marked outputs.
    pub fn forward(
        &mut self,
        inputs: &[(&str, &Tensor)],
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        for (name, t) in inputs {
            self.bind(name, t)?;
        }
        self.run()?;
        Ok(self
            .outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    /// Re-evaluates every node with the current bindings.
    pub fn run(&mut self) -> Result<(), GraphError> {
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Input) && !self.bound[i] {
                return Err(GraphError::UnboundInput(n.name.clone()));
            }
        }
        for i in 0..self.nodes.len() {
            self.eval_node(i)?;
        }
        self.evaluated = true;
        Ok(())
    }

    fn eval_node(&mut self, i: usize) -> Result<(), GraphError> {
        let op = self.nodes[i].op.clone();
        if matches!(op, Op::Input | Op::Param | Op::Constant) {
            return Ok(());
        }
        let mut out = std::mem::take(&mut self.nodes[i].value);
        let mut aux = std::mem::take(&mut self.nodes[i].aux);
        let shape = self.nodes[i].shape.clone();
        out.reset(&shape);
        let mut col = std::mem::take(&mut self.col);
        let res = self.compute(i, &op, &mut out, &mut aux, &mut col);
        self.col = col;
        self.nodes[i].value = out;
        self.nodes[i].aux = aux;
        res
    }

    fn compute(
        &self,
        i: usize,
        op: &Op,
        out: &mut Tensor,
        aux: &mut Vec<u32>,
        col: &mut Vec<f64>,
    ) -> Result<(), GraphError> {
        let v = |id: &NodeId| self.nodes[id.0].value.data();
        let o = out.data_mut();
        match op {
            Op::Input | Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                for ((o, x), y) in o.iter_mut().zip(v(a)).zip(v(b)) {
                    *o = x + y;
                }
            }
            Op::Sub(a, b) => {
                for ((o, x), y) in o.iter_mut().zip(v(a)).zip(v(b)) {
                    *o = x - y;
                }
            }
            Op::Mul(a, b) => {
                for ((o, x), y) in o.iter_mut().zip(v(a)).zip(v(b)) {
                    *o = x * y;
                }
            }
            Op::Scale(a, c) => {
                for (o, x) in o.iter_mut().zip(v(a)) {
                    *o = c * x;
                }
            }
            Op::ScalarMul { scalar, x } => {
                let s = v(scalar)[0];
                for (o, x) in o.iter_mut().zip(v(x)) {
                    *o = s * x;
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.sh(*a), self.sh(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                kernels::gemm(m, k, n, v(a), (k, 1), v(b), (n, 1), 0.0, o);
            }
            Op::Conv2d { x, kernel, bias } => {
                let d = self.conv_dims(*x, *kernel);
                let b = bias.map(|b| self.nodes[b.0].value.data());
                kernels::conv2d_forward(v(x), v(kernel), b, &d, o, col);
            }
            Op::Linear { x, weight, bias } => {
                let (xv, w) = (v(x), v(weight));
                let n = xv.len();
                for (r, o) in o.iter_mut().enumerate() {
                    let row = &w[r * n..(r + 1) * n];
                    *o = row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(b) = bias {
                    for (o, b) in o.iter_mut().zip(v(b)) {
                        *o += b;
                    }
                }
            }
            Op::Relu(a) => {
                for (o, x) in o.iter_mut().zip(v(a)) {
                    *o = if *x > 0.0 { *x } else { 0.0 };
                }
            }
            Op::Sigmoid(a) => {
                for (o, x) in o.iter_mut().zip(v(a)) {
                    *o = sigmoid(*x);
                }
            }
            Op::Softplus(a) => {
                for (o, x) in o.iter_mut().zip(v(a)) {
                    *o = softplus(*x);
                }
            }
            Op::SoftThreshold { x, theta } => {
                let th = v(theta);
                if let Some(bad) = th.iter().find(|t| **t < 0.0) {
                    return Err(GraphError::Domain {
                        node: self.nodes[i].name.clone(),
                        detail: format!("negative threshold {bad}"),
                    });
                }
                for ((o, x), t) in o.iter_mut().zip(v(x)).zip(th) {
                    let m = x.abs() - t;
                    *o = if m > 0.0 { m.copysign(*x) } else { 0.0 };
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let src = v(p);
                    o[off..off + src.len()].copy_from_slice(src);
                    off += src.len();
                }
            }
            Op::ChannelMean(a) => {
                let s = self.sh(*a);
                let (c, plane) = (s[0], s[1] * s[2]);
                let x = v(a);
                for ch in 0..c {
                    for (o, x) in o.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
                        *o += x;
                    }
                }
                let inv = 1.0 / c as f64;
                for o in o.iter_mut() {
                    *o *= inv;
                }
            }
            Op::ChannelMax(a) => {
                let s = self.sh(*a);
                let (c, plane) = (s[0], s[1] * s[2]);
                let x = v(a);
                aux.clear();
                aux.resize(plane, 0);
                o.copy_from_slice(&x[..plane]);
                for ch in 1..c {
                    for p in 0..plane {
                        let val = x[ch * plane + p];
                        if val > o[p] {
                            o[p] = val;
                            aux[p] = ch as u32;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                o[0] = v(a).iter().sum();
            }
            Op::Mse(a, b) => {
                let (x, y) = (v(a), v(b));
                let ss: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
                o[0] = ss / x.len() as f64;
            }
            Op::Reshape(a) => o.copy_from_slice(v(a)),
        }
        Ok(())
    }

    fn conv_dims(&self, x: NodeId, kernel: NodeId) -> ConvDims {
        let (sx, sk) = (self.sh(x), self.sh(kernel));
        ConvDims {
            cin: sx[0],
            cout: sk[0],
            h: sx[1],
            w: sx[2],
            kh: sk[2],
            kw: sk[3],
        }
    }

    /// Smallest distance of any cached pre-activation from a point where the
    /// graph is not differentiable (relu at 0, soft-threshold at |x| = theta,
    /// channel-max ties). Finite-difference probes closer than this are unreliable.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for n in &self.nodes {
            match &n.op {
                Op::Relu(a) => {
                    for x in self.nodes[a.0].value.data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::SoftThreshold { x, theta } => {
                    for (x, t) in self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[theta.0].value.data())
                    {
                        margin = margin.min((x.abs() - t).abs());
                    }
                }
                Op::ChannelMax(a) => {
                    let s = &self.nodes[a.0].shape;
                    let (c, plane) = (s[0], s[1] * s[2]);
                    let x = self.nodes[a.0].value.data();
                    for p in 0..plane {
                        let best = n.value.data()[p];
                        for ch in 0..c {
                            if ch as u32 != n.aux[p] {
                                margin = margin.min(best - x[ch * plane + p]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ----- backward -----

    /// Reverse-mode pass seeded with ones, i.e. gradients of the sum of `output`.
    pub fn backward(&mut self, output: NodeId) -> Result<(), GraphError> {
        let seed = Tensor::ones(self.shape(output));
        self.backward_with_seed(output, &seed)
    }

    pub fn backward_with_seed(&mut self, output: NodeId, seed: &Tensor) -> Result<(), GraphError> {
        if !self.evaluated {
            return Err(GraphError::BackwardBeforeForward);
        }
        if seed.shape() != self.shape(output) {
            return Err(GraphError::Shape {
                node: self.name(output).to_string(),
                detail: format!("seed {:?} for output {:?}", seed.shape(), self.shape(output)),
            });
        }
        let n = self.nodes.len();
        self.grads.resize_with(n, Tensor::default);
        self.grad_live.clear();
        self.grad_live.resize(n, false);
        {
            let g = self.acc(output);
            g.copy_from_slice(seed.data());
        }
        for i in (0..=output.0).rev() {
            if !self.grad_live[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Input | Op::Param | Op::Constant) {
                continue;
            }
            let mut g = std::mem::take(&mut self.grads[i]);
            if let Some((node, factor)) = self.fault {
                if node.0 == i {
                    for v in g.data_mut() {
                        *v *= factor;
                    }
                }
            }
            self.propagate(i, &op, g.data());
            self.grads[i] = g;
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId) -> &mut [f64] {
        if !self.grad_live[id.0] {
            let shape = self.nodes[id.0].shape.clone();
            self.grads[id.0].reset(&shape);
            self.grad_live[id.0] = true;
        }
        self.grads[id.0].data_mut()
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Input | Op::Param | Op::Constant => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    for (d, g) in self.acc(*a).iter_mut().zip(g) {
                        *d += g;
                    }
                }
                if self.wants(*b) {
                    for (d, g) in self.acc(*b).iter_mut().zip(g) {
                        *d += sign * g;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (target, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(target) {
                        let ov = self.nodes[other.0].value.data().to_vec();
                        for ((d, g), o) in self.acc(target).iter_mut().zip(g).zip(&ov) {
                            *d += g * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    for (d, g) in self.acc(*a).iter_mut().zip(g) {
                        *d += c * g;
                    }
                }
            }
            Op::ScalarMul { scalar, x } => {
                let s = self.nodes[scalar.0].value.data()[0];
                if self.wants(*scalar) {
                    let dot: f64 = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(a, b)| a * b)
                        .sum();
                    self.acc(*scalar)[0] += dot;
                }
                if self.wants(*x) {
                    for (d, g) in self.acc(*x).iter_mut().zip(g) {
                        *d += s * g;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.sh(*a)[0], self.sh(*a)[1]);
                let n = self.sh(*b)[1];
                if self.wants(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value);
                    // gA[m,k] += g[m,n] * B^T[n,k]
                    kernels::gemm(m, n, k, g, (n, 1), bv.data(), (1, n), 1.0, self.acc(*a));
                    self.nodes[b.0].value = bv;
                }
                if self.wants(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value);
                    // gB[k,n] += A^T[k,m] * g[m,n]
                    kernels::gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, self.acc(*b));
                    self.nodes[a.0].value = av;
                }
            }
            Op::Conv2d { x, kernel, bias } => {
                let d = self.conv_dims(*x, *kernel);
                let mut col = std::mem::take(&mut self.col);
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let kv = std::mem::take(&mut self.nodes[kernel.0].value);
                let mut gx = self.take_grad(*x);
                let mut gk = self.take_grad(*kernel);
                let mut gb = bias.and_then(|b| self.take_grad(b));
                kernels::conv2d_backward(
                    xv.data(),
                    kv.data(),
                    g,
                    &d,
                    gx.as_mut().map(|t| t.data_mut()),
                    gk.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                    &mut col,
                );
                self.put_grad(*x, gx);
                self.put_grad(*kernel, gk);
                if let Some(b) = bias {
                    self.put_grad(*b, gb);
                }
                self.nodes[x.0].value = xv;
                self.nodes[kernel.0].value = kv;
                self.col = col;
            }
            Op::Linear { x, weight, bias } => {
                let n = self.sh(*x)[0];
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[weight.0].value.data().to_vec();
                if self.wants(*x) {
                    let gx = self.acc(*x);
                    for (r, gr) in g.iter().enumerate() {
                        for (d, w) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *d += gr * w;
                        }
                    }
                }
                if self.wants(*weight) {
                    let gw = self.acc(*weight);
                    for (r, gr) in g.iter().enumerate() {
                        for (d, xj) in gw[r * n..(r + 1) * n].iter_mut().zip(&xv) {
                            *d += gr * xj;
                        }
                    }
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        for (d, g) in self.acc(*b).iter_mut().zip(g) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.wants(*a) {
                    let xv = std::mem::take(&mut self.nodes[a.0].value);
                    for ((d, g), x) in self.acc(*a).iter_mut().zip(g).zip(xv.data()) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                    self.nodes[a.0].value = xv;
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let out = std::mem::take(&mut self.nodes[i].value);
                    for ((d, g), y) in self.acc(*a).iter_mut().zip(g).zip(out.data()) {
                        *d += g * y * (1.0 - y);
                    }
                    self.nodes[i].value = out;
                }
            }
            Op::Softplus(a) => {
                if self.wants(*a) {
                    let xv = std::mem::take(&mut self.nodes[a.0].value);
                    for ((d, g), x) in self.acc(*a).iter_mut().zip(g).zip(xv.data()) {
                        *d += g * sigmoid(*x);
                    }
                    self.nodes[a.0].value = xv;
                }
            }
            Op::SoftThreshold { x, theta } => {
                let xv = std::mem::take(&mut self.nodes[x.0].value);
                let tv = std::mem::take(&mut self.nodes[theta.0].value);
                if self.wants(*x) {
                    for (((d, g), x), t) in self.acc(*x).iter_mut().zip(g).zip(xv.data()).zip(tv.data()) {
                        if x.abs() > *t {
                            *d += g;
                        }
                    }
                }
                if self.wants(*theta) {
                    for (((d, g), x), t) in
                        self.acc(*theta).iter_mut().zip(g).zip(xv.data()).zip(tv.data())
                    {
                        if x.abs() > *t {
                            *d -= g * x.signum();
                        }
                    }
                }
                self.nodes[x.0].value = xv;
                self.nodes[theta.0].value = tv;
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = numel(self.sh(*p));
                    if self.wants(*p) {
                        for (d, g) in self.acc(*p).iter_mut().zip(&g[off..off + len]) {
                            *d += g;
                        }
                    }
                    off += len;
                }
            }
            Op::ChannelMean(a) => {
                if self.wants(*a) {
                    let c = self.sh(*a)[0];
                    let plane = g.len();
                    let inv = 1.0 / c as f64;
                    let ga = self.acc(*a);
                    for ch in 0..c {
                        for (d, g) in ga[ch * plane..(ch + 1) * plane].iter_mut().zip(g) {
                            *d += g * inv;
                        }
                    }
                }
            }
            Op::ChannelMax(a) => {
                if self.wants(*a) {
                    let plane = g.len();
                    let idx = std::mem::take(&mut self.nodes[i].aux);
                    let ga = self.acc(*a);
                    for p in 0..plane {
                        ga[idx[p] as usize * plane + p] += g[p];
                    }
                    self.nodes[i].aux = idx;
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    for d in self.acc(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let k = 2.0 * g[0] / av.len() as f64;
                if self.wants(*a) {
                    for ((d, x), y) in self.acc(*a).iter_mut().zip(&av).zip(&bv) {
                        *d += k * (x - y);
                    }
                }
                if self.wants(*b) {
                    for ((d, x), y) in self.acc(*b).iter_mut().zip(&av).zip(&bv) {
                        *d -= k * (x - y);
                    }
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    for (d, g) in self.acc(*a).iter_mut().zip(g) {
                        *d += g;
                    }
                }
            }
        }
    }

    fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        if !self.wants(id) {
            return None;
        }
        self.acc(id);
        Some(std::mem::take(&mut self.grads[id.0]))
    }

    fn put_grad(&mut self, id: NodeId, g: Option<Tensor>) {
        if let Some(g) = g {
            self.grads[id.0] = g;
        }
    }

    /// Gradient of the last backward pass with respect to `id`, if any flowed.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        if self.grad_live.get(id.0).copied().unwrap_or(false) {
            Some(&self.grads[id.0])
        } else {
            None
        }
    }

    /// Gradients of all trainable parameters in declaration order; parameters
    /// untouched by the last pass get zeros.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        self.params()
            .map(|(id, name, v)| {
                let g = self
                    .grad(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.to_string(), g)
            })
            .collect()
    }

    pub(crate) fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub(crate) fn is_trainable_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Param) && self.nodes[id.0].trainable
    }

    /// Scales the gradient leaving `node` during backward by `factor`. Exists only
    /// to plant a known defect for gradient-checker negative controls.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, node: NodeId, factor: f64) {
        self.fault = Some((node, factor));
    }
}
