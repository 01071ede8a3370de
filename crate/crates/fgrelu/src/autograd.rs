//! Reverse-mode differentiation over a static tape.
//!
//! A `Tape` is an append-only list of nodes in topological order; building an
//! op pushes a node whose parents already exist, so the graph is acyclic by
//! construction. Tapes are rebuilt per batch. Parameters live outside the
//! tape in a `ParamStore`; a parameter used at several places (weight sharing
//! across unrolled passes) appears as a single node and its gradient
//! accumulates by summation across all paths.

use rayon::prelude::*;

use crate::activation::{self, FgReluParams, GainValue};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_sample, conv2d_sample, conv2d_transpose_backward_sample,
    conv2d_transpose_sample, max_pool2d_sample, ConvGeom, ConvTransposeGeom, Padding, Tensor,
};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named parameter tensors plus a trainable flag (running statistics are
/// stored here too, marked non-trainable).
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.trainable[id.0]).collect()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.trainable_ids().iter().map(|id| self.get(*id).len()).sum()
    }
}

/// Gradient per parameter, indexed by `ParamId`; `None` when the parameter
/// did not appear on the tape.
pub type GradMap = Vec<Option<Tensor>>;

/// Batch-norm statistics source.
#[derive(Debug, Clone)]
pub enum BnMode {
    /// Normalize with statistics of the current batch (training).
    Batch,
    /// Normalize with frozen running statistics (evaluation).
    Running { mean: Vec<Real>, var: Vec<Real> },
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Placeholder { name: String },
    Param(ParamId),
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, Real),
    /// `[B,N] + row[N]`, the bias broadcast.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `A · Bᵀ`; used for feedback projections stored as `[target×source]`.
    MatMulBT(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    /// Gated activation; `pre` and `feedback` share a shape.
    FgRelu { pre: NodeId, feedback: NodeId, params: FgReluParams },
    /// Threshold variant; `alpha` is a scalar parameter node.
    FgReluThreshold { pre: NodeId, feedback: NodeId, alpha: NodeId, params: FgReluParams },
    /// Fixed gain on rectified activations; replaces the feedback path.
    GainOverride { pre: NodeId, value: GainValue },
    Conv2d { input: NodeId, kernels: NodeId, bias: Option<NodeId>, stride: usize, padding: Padding },
    Conv2dTranspose { input: NodeId, kernels: NodeId, bias: Option<NodeId>, stride: usize },
    MaxPool2x2(NodeId),
    /// `[B,C,H,W] → [B,C]`, mean over spatial positions (filter-wise feedback).
    ChannelMeans(NodeId),
    /// `[B,C] → [B,C,h,w]`, one value repeated across all spatial units.
    BroadcastChannel { input: NodeId, height: usize, width: usize },
    BatchNorm { input: NodeId, gamma: NodeId, shift: NodeId, eps: Real, mode: BnMode },
    /// Elementwise multiply by a fixed mask (inverted dropout).
    Dropout { input: NodeId, mask: Tensor },
    /// Add a fixed tensor (noise injection at evaluation).
    AddConst { input: NodeId, value: Tensor },
    /// Identity forward, zero backward (optional pass-boundary stop-gradient).
    Detach(NodeId),
    /// Same data, new shape (e.g. flattening conv features for a dense layer).
    Reshape { input: NodeId, shape: Vec<usize> },
    Mse { pred: NodeId, target: Tensor },
    Bce { pred: NodeId, target: Tensor },
    SoftmaxXent { logits: NodeId, labels: Vec<u8> },
}

/// Saved forward state some backward rules need.
#[derive(Debug, Clone, Default)]
enum Aux {
    #[default]
    None,
    PoolIdx(Vec<usize>),
    BnCache { inv_std: Vec<Real>, x_hat: Tensor, batch_mean: Vec<Real>, batch_var: Vec<Real> },
    Probs(Tensor),
}

#[derive(Debug)]
struct Node {
    kind: OpKind,
    aux: Aux,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    param_nodes: Vec<(ParamId, NodeId)>,
    output: Option<NodeId>,
}

const BCE_CLAMP: Real = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, kind: OpKind) -> NodeId {
        self.nodes.push(Node { kind, aux: Aux::None });
        self.values.push(None);
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn placeholder(&mut self, name: &str) -> NodeId {
        self.push(OpKind::Placeholder { name: name.to_string() })
    }

    /// Node for a stored parameter; one node per parameter, shared by all
    /// consumers so gradients accumulate.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(pid, _)| *pid == id) {
            return node;
        }
        let node = self.push(OpKind::Param(id));
        self.param_nodes.push((id, node));
        node
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: Real) -> NodeId {
        self.push(OpKind::Scale(a, c))
    }

    pub fn add_row(&mut self, matrix: NodeId, row: NodeId) -> NodeId {
        self.push(OpKind::AddRow(matrix, row))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::MatMulBT(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(OpKind::Sigmoid(a))
    }

    pub fn fg_relu(&mut self, pre: NodeId, feedback: NodeId, params: FgReluParams) -> NodeId {
        self.push(OpKind::FgRelu { pre, feedback, params })
    }

    pub fn fg_relu_threshold(
        &mut self,
        pre: NodeId,
        feedback: NodeId,
        alpha: NodeId,
        params: FgReluParams,
    ) -> NodeId {
        self.push(OpKind::FgReluThreshold { pre, feedback, alpha, params })
    }

    pub fn gain_override(&mut self, pre: NodeId, value: GainValue) -> NodeId {
        self.push(OpKind::GainOverride { pre, value })
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> NodeId {
        self.push(OpKind::Conv2d { input, kernels, bias, stride, padding })
    }

    pub fn conv2d_transpose(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> NodeId {
        self.push(OpKind::Conv2dTranspose { input, kernels, bias, stride })
    }

    pub fn max_pool2x2(&mut self, input: NodeId) -> NodeId {
        self.push(OpKind::MaxPool2x2(input))
    }

    pub fn channel_means(&mut self, input: NodeId) -> NodeId {
        self.push(OpKind::ChannelMeans(input))
    }

    pub fn broadcast_channel(&mut self, input: NodeId, height: usize, width: usize) -> NodeId {
        self.push(OpKind::BroadcastChannel { input, height, width })
    }

    pub fn batch_norm(&mut self, input: NodeId, gamma: NodeId, shift: NodeId, eps: Real, mode: BnMode) -> NodeId {
        self.push(OpKind::BatchNorm { input, gamma, shift, eps, mode })
    }

    pub fn dropout(&mut self, input: NodeId, mask: Tensor) -> NodeId {
        self.push(OpKind::Dropout { input, mask })
    }

    pub fn add_const(&mut self, input: NodeId, value: Tensor) -> NodeId {
        self.push(OpKind::AddConst { input, value })
    }

    pub fn detach(&mut self, input: NodeId) -> NodeId {
        self.push(OpKind::Detach(input))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(OpKind::Reshape { input, shape })
    }

    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        self.push(OpKind::Mse { pred, target })
    }

    pub fn bce(&mut self, pred: NodeId, target: Tensor) -> NodeId {
        self.push(OpKind::Bce { pred, target })
    }

    pub fn softmax_xent(&mut self, logits: NodeId, labels: Vec<u8>) -> NodeId {
        self.push(OpKind::SoftmaxXent { logits, labels })
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Bind a placeholder by name.
    pub fn bind(&mut self, name: &str, value: Tensor) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let OpKind::Placeholder { name: n } = &node.kind {
                if n == name {
                    self.values[i] = Some(value);
                    return Ok(());
                }
            }
        }
        Err(Error::Graph(format!("no placeholder named `{name}`")))
    }

    /// Forward value of a node after `forward` has run.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values[id.0]
            .as_ref()
            .ok_or_else(|| Error::Graph(format!("node {} has no value; run forward first", id.0)))
    }

    /// Gradient of a node after `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Batch statistics a batch-norm node computed during the last forward
    /// pass, as `(mean, var)` per channel.
    pub fn bn_batch_stats(&self, id: NodeId) -> Option<(&[Real], &[Real])> {
        match &self.nodes[id.0].aux {
            Aux::BnCache { batch_mean, batch_var, .. } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Evaluate every node in topological order; returns the output value.
    pub fn forward(&mut self, store: &ParamStore) -> Result<Tensor> {
        for i in 0..self.nodes.len() {
            let (value, aux) = eval_node(&self.nodes[i].kind, &self.values, i, store)?;
            self.values[i] = Some(value);
            self.nodes[i].aux = aux;
        }
        let out = self
            .output
            .ok_or_else(|| Error::Graph("tape has no output node".into()))?;
        Ok(self.value(out)?.clone())
    }

    /// Reverse sweep from the scalar output; returns one gradient per
    /// parameter (indexed by `ParamId`).
    pub fn backward(&mut self, store: &ParamStore) -> Result<GradMap> {
        let out = self
            .output
            .ok_or_else(|| Error::Graph("tape has no output node".into()))?;
        let out_val = self.value(out)?;
        if !out_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[out.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = self.grads[i].clone() else { continue };
            backprop_node(&self.nodes[i].kind, &self.nodes[i].aux, &grad, &self.values, &mut self.grads)?;
        }

        let mut grads: GradMap = vec![None; store.len()];
        for &(pid, node) in &self.param_nodes {
            grads[pid.0] = self.grads[node.0].clone();
        }
        Ok(grads)
    }
}

/// Channel decomposition used by batch norm: (channel count, elements per
/// channel, channel index of a flat position).
fn bn_channel_of(shape: &[usize]) -> Result<(usize, usize, fn(&[usize], usize) -> usize)> {
    match shape.len() {
        2 => {
            fn ch(shape: &[usize], idx: usize) -> usize {
                idx % shape[1]
            }
            Ok((shape[1], shape[0], ch))
        }
        4 => {
            fn ch(shape: &[usize], idx: usize) -> usize {
                (idx / (shape[2] * shape[3])) % shape[1]
            }
            Ok((shape[1], shape[0] * shape[2] * shape[3], ch))
        }
        _ => Err(Error::dim(format!("batch_norm expects [B,N] or [B,C,H,W], got {shape:?}"))),
    }
}

fn eval_node(kind: &OpKind, values: &[Option<Tensor>], own: usize, store: &ParamStore) -> Result<(Tensor, Aux)> {
    let v = |id: NodeId| values[id.0].as_ref().expect("parents are evaluated before children");
    match kind {
        OpKind::Placeholder { name } => values[own]
            .clone()
            .map(|t| (t, Aux::None))
            .ok_or_else(|| Error::Graph(format!("placeholder `{name}` is not bound"))),
        OpKind::Param(id) => Ok((store.get(*id).clone(), Aux::None)),
        OpKind::Constant(t) => Ok((t.clone(), Aux::None)),
        OpKind::Add(a, b) => Ok((v(*a).add(v(*b))?, Aux::None)),
        OpKind::Sub(a, b) => Ok((v(*a).sub(v(*b))?, Aux::None)),
        OpKind::Mul(a, b) => Ok((v(*a).mul(v(*b))?, Aux::None)),
        OpKind::Scale(a, c) => Ok((v(*a).scale(*c), Aux::None)),
        OpKind::AddRow(m, r) => {
            let (mat, row) = (v(*m), v(*r));
            if mat.rank() != 2 || row.rank() != 1 || mat.shape()[1] != row.shape()[0] {
                return Err(Error::dim(format!(
                    "add_row: shapes {:?} and {:?} are incompatible",
                    mat.shape(),
                    row.shape()
                )));
            }
            let cols = row.shape()[0];
            let mut out = mat.clone();
            for (i, x) in out.data_mut().iter_mut().enumerate() {
                *x += row.data()[i % cols];
            }
            Ok((out, Aux::None))
        }
        OpKind::MatMul(a, b) => Ok((v(*a).matmul(v(*b))?, Aux::None)),
        OpKind::MatMulBT(a, b) => Ok((v(*a).matmul_bt(v(*b))?, Aux::None)),
        OpKind::Relu(a) => Ok((v(*a).map(|x| x.max(0.0)), Aux::None)),
        OpKind::Sigmoid(a) => Ok((v(*a).map(|x| 1.0 / (1.0 + (-x).exp())), Aux::None)),
        OpKind::FgRelu { pre, feedback, params } => {
            let (p, f) = (v(*pre), v(*feedback));
            if p.shape() != f.shape() {
                return Err(Error::dim(format!(
                    "fg_relu: pre-activation {:?} and feedback {:?} differ",
                    p.shape(),
                    f.shape()
                )));
            }
            let data = p
                .data()
                .iter()
                .zip(f.data())
                .map(|(&s, &d)| activation::fg_relu(s, d, params))
                .collect();
            Ok((Tensor::new(p.shape().to_vec(), data)?, Aux::None))
        }
        OpKind::FgReluThreshold { pre, feedback, alpha, params } => {
            let (p, f) = (v(*pre), v(*feedback));
            let a = v(*alpha).item()?;
            if p.shape() != f.shape() {
                return Err(Error::dim(format!(
                    "fg_relu_threshold: pre-activation {:?} and feedback {:?} differ",
                    p.shape(),
                    f.shape()
                )));
            }
            let params = params.clone().with_alpha(a);
            let mut data = Vec::with_capacity(p.len());
            for (&s, &d) in p.data().iter().zip(f.data()) {
                data.push(activation::fg_relu_threshold(s, d, &params)?);
            }
            Ok((Tensor::new(p.shape().to_vec(), data)?, Aux::None))
        }
        OpKind::GainOverride { pre, value } => {
            Ok((activation::apply_gain_override(v(*pre), value)?, Aux::None))
        }
        OpKind::Conv2d { input, kernels, bias, stride, padding } => {
            let (x, k) = (v(*input), v(*kernels));
            let b = bias.map(|b| v(b));
            if x.rank() != 4 {
                return Err(Error::dim(format!("conv2d node expects [B,C,H,W], got {:?}", x.shape())));
            }
            let geom = ConvGeom::infer(&x.shape()[1..], k.shape(), *stride, *padding)?;
            let batch = x.shape()[0];
            let in_sz = geom.c_in * geom.h * geom.w;
            let out_sz = geom.c_out * geom.h_out * geom.w_out;
            let mut out = Tensor::zeros(&[batch, geom.c_out, geom.h_out, geom.w_out]);
            let kd = k.data();
            let bd = b.map(|b| b.data());
            out.data_mut()
                .par_chunks_mut(out_sz)
                .zip(x.data().par_chunks(in_sz))
                .for_each(|(o, xi)| conv2d_sample(xi, kd, bd, &geom, o));
            Ok((out, Aux::None))
        }
        OpKind::Conv2dTranspose { input, kernels, bias, stride } => {
            let (x, k) = (v(*input), v(*kernels));
            let b = bias.map(|b| v(b));
            if x.rank() != 4 {
                return Err(Error::dim(format!(
                    "conv2d_transpose node expects [B,C,H,W], got {:?}",
                    x.shape()
                )));
            }
            let geom = ConvTransposeGeom::infer(&x.shape()[1..], k.shape(), *stride)?;
            let batch = x.shape()[0];
            let in_sz = geom.c_in * geom.h * geom.w;
            let out_sz = geom.c_out * geom.h_out * geom.w_out;
            let mut out = Tensor::zeros(&[batch, geom.c_out, geom.h_out, geom.w_out]);
            let kd = k.data();
            let bd = b.map(|b| b.data());
            out.data_mut()
                .par_chunks_mut(out_sz)
                .zip(x.data().par_chunks(in_sz))
                .for_each(|(o, xi)| conv2d_transpose_sample(xi, kd, bd, &geom, o));
            Ok((out, Aux::None))
        }
        OpKind::MaxPool2x2(input) => {
            let x = v(*input);
            if x.rank() != 4 {
                return Err(Error::dim(format!("max_pool node expects [B,C,H,W], got {:?}", x.shape())));
            }
            let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            if h < 2 || w < 2 {
                return Err(Error::dim(format!(
                    "max_pool: spatial dims of {:?} smaller than the 2×2 window",
                    x.shape()
                )));
            }
            let (ho, wo) = (h / 2, w / 2);
            let batch = x.shape()[0];
            let in_sz = c * h * w;
            let out_sz = c * ho * wo;
            let mut out = Tensor::zeros(&[batch, c, ho, wo]);
            let mut idx = vec![0usize; batch * out_sz];
            out.data_mut()
                .par_chunks_mut(out_sz)
                .zip(idx.par_chunks_mut(out_sz))
                .zip(x.data().par_chunks(in_sz))
                .enumerate()
                .for_each(|(b, ((o, ix), xi))| {
                    max_pool2d_sample(xi, c, h, w, o, ix);
                    for v in ix.iter_mut() {
                        *v += b * in_sz;
                    }
                });
            Ok((out, Aux::PoolIdx(idx)))
        }
        OpKind::ChannelMeans(input) => {
            let x = v(*input);
            if x.rank() != 4 {
                return Err(Error::dim(format!(
                    "channel_means expects [B,C,H,W], got {:?}",
                    x.shape()
                )));
            }
            let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let plane = h * w;
            let mut out = Tensor::zeros(&[batch, c]);
            for b in 0..batch {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    out.data_mut()[b * c + ch] =
                        x.data()[base..base + plane].iter().sum::<Real>() / plane as Real;
                }
            }
            Ok((out, Aux::None))
        }
        OpKind::BroadcastChannel { input, height, width } => {
            let x = v(*input);
            if x.rank() != 2 {
                return Err(Error::dim(format!(
                    "broadcast_channel expects [B,C], got {:?}",
                    x.shape()
                )));
            }
            let (batch, c) = (x.shape()[0], x.shape()[1]);
            let plane = height * width;
            let mut out = Tensor::zeros(&[batch, c, *height, *width]);
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                chunk.fill(x.data()[i]);
            }
            Ok((out, Aux::None))
        }
        OpKind::BatchNorm { input, gamma, shift, eps, mode } => {
            let x = v(*input);
            let gm = v(*gamma);
            let sh = v(*shift);
            let (channels, per_channel, ch_of) = bn_channel_of(x.shape())?;
            if gm.len() != channels || sh.len() != channels {
                return Err(Error::dim(format!(
                    "batch_norm: scale/shift of {}/{} values for {channels} channels",
                    gm.len(),
                    sh.len()
                )));
            }
            let (mean, var) = match mode {
                BnMode::Batch => {
                    let mut mean = vec![0.0; channels];
                    let mut var = vec![0.0; channels];
                    for (i, &xv) in x.data().iter().enumerate() {
                        mean[ch_of(x.shape(), i)] += xv;
                    }
                    for m in mean.iter_mut() {
                        *m /= per_channel as Real;
                    }
                    for (i, &xv) in x.data().iter().enumerate() {
                        let c = ch_of(x.shape(), i);
                        var[c] += (xv - mean[c]) * (xv - mean[c]);
                    }
                    for vv in var.iter_mut() {
                        *vv /= per_channel as Real;
                    }
                    (mean, var)
                }
                BnMode::Running { mean, var } => (mean.clone(), var.clone()),
            };
            let inv_std: Vec<Real> = var.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
            let mut x_hat = x.clone();
            for (i, xh) in x_hat.data_mut().iter_mut().enumerate() {
                let c = ch_of(x.shape(), i);
                *xh = (*xh - mean[c]) * inv_std[c];
            }
            let mut out = x_hat.clone();
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                let c = ch_of(x.shape(), i);
                *o = gm.data()[c] * *o + sh.data()[c];
            }
            Ok((out, Aux::BnCache { inv_std, x_hat, batch_mean: mean, batch_var: var }))
        }
        OpKind::Dropout { input, mask } => Ok((v(*input).mul(mask)?, Aux::None)),
        OpKind::AddConst { input, value } => Ok((v(*input).add(value)?, Aux::None)),
        OpKind::Detach(input) => Ok((v(*input).clone(), Aux::None)),
        OpKind::Reshape { input, shape } => Ok((v(*input).reshape(shape)?, Aux::None)),
        OpKind::Mse { pred, target } => {
            let p = v(*pred);
            if p.shape() != target.shape() {
                return Err(Error::dim(format!(
                    "mse: prediction {:?} and target {:?} differ",
                    p.shape(),
                    target.shape()
                )));
            }
            let n = p.len() as Real;
            let sum: Real = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            Ok((Tensor::scalar(sum / n), Aux::None))
        }
        OpKind::Bce { pred, target } => {
            let p = v(*pred);
            if p.shape() != target.shape() {
                return Err(Error::dim(format!(
                    "bce: prediction {:?} and target {:?} differ",
                    p.shape(),
                    target.shape()
                )));
            }
            if p.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Domain(
                    "bce: prediction values must lie in [0, 1]".into(),
                ));
            }
            let n = p.len() as Real;
            let sum: Real = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| {
                    let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
                })
                .sum();
            Ok((Tensor::scalar(sum / n), Aux::None))
        }
        OpKind::SoftmaxXent { logits, labels } => {
            let z = v(*logits);
            if z.rank() != 2 || z.shape()[0] != labels.len() {
                return Err(Error::dim(format!(
                    "softmax_xent: logits {:?} vs {} labels",
                    z.shape(),
                    labels.len()
                )));
            }
            let (batch, classes) = (z.shape()[0], z.shape()[1]);
            let mut probs = z.clone();
            let mut loss = 0.0;
            for b in 0..batch {
                let row = &mut probs.data_mut()[b * classes..(b + 1) * classes];
                let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut denom = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    denom += *x;
                }
                for x in row.iter_mut() {
                    *x /= denom;
                }
                loss -= row[labels[b] as usize].max(BCE_CLAMP).ln();
            }
            Ok((Tensor::scalar(loss / batch as Real), Aux::Probs(probs)))
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(delta),
        Some(existing) => *existing = existing.add(&delta)?,
    }
    Ok(())
}

/// Propagate `grad` of one node into its parents' gradient slots.
fn backprop_node(
    kind: &OpKind,
    aux: &Aux,
    grad: &Tensor,
    values: &[Option<Tensor>],
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |id: NodeId| values[id.0].as_ref().expect("forward has run");
    macro_rules! push {
        ($id:expr, $delta:expr) => {
            accumulate(&mut grads[$id.0], $delta)?
        };
    }
    match kind {
        OpKind::Placeholder { .. } | OpKind::Param(_) | OpKind::Constant(_) => {}
        OpKind::Add(a, b) => {
            push!(a, grad.clone());
            push!(b, grad.clone());
        }
        OpKind::Sub(a, b) => {
            push!(a, grad.clone());
            push!(b, grad.scale(-1.0));
        }
        OpKind::Mul(a, b) => {
            let da = grad.mul(val(*b))?;
            let db = grad.mul(val(*a))?;
            push!(a, da);
            push!(b, db);
        }
        OpKind::Scale(a, c) => push!(a, grad.scale(*c)),
        OpKind::AddRow(m, r) => {
            let cols = val(*r).len();
            let mut drow = Tensor::zeros(&[cols]);
            for (i, &g) in grad.data().iter().enumerate() {
                drow.data_mut()[i % cols] += g;
            }
            push!(m, grad.clone());
            push!(r, drow);
        }
        OpKind::MatMul(a, b) => {
            let da = grad.matmul_bt(val(*b))?;
            let db = val(*a).matmul_at(grad)?;
            push!(a, da);
            push!(b, db);
        }
        OpKind::MatMulBT(a, b) => {
            let da = grad.matmul(val(*b))?;
            let db = grad.matmul_at(val(*a))?;
            push!(a, da);
            push!(b, db);
        }
        OpKind::Relu(a) => {
            let mut d = grad.clone();
            for (g, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
            push!(a, d);
        }
        OpKind::Sigmoid(a) => {
            // σ'(x) = σ(x)(1−σ(x)); recompute σ from the input value.
            let mut d = grad.clone();
            for (g, &x) in d.data_mut().iter_mut().zip(val(*a).data()) {
                let y = 1.0 / (1.0 + (-x).exp());
                *g *= y * (1.0 - y);
            }
            push!(a, d);
        }
        OpKind::FgRelu { pre, feedback, params } => {
            let (pv, fv) = (val(*pre), val(*feedback));
            let mut dpre = grad.clone();
            let mut dfb = grad.clone();
            for i in 0..pv.len() {
                let g = activation::fg_relu_grads(pv.data()[i], fv.data()[i], params);
                dpre.data_mut()[i] *= g.d_mu_s;
                dfb.data_mut()[i] *= g.d_mu_d;
            }
            push!(pre, dpre);
            push!(feedback, dfb);
        }
        OpKind::FgReluThreshold { pre, feedback, alpha, params } => {
            let a = val(*alpha).item()?;
            let params = params.clone().with_alpha(a);
            let (pv, fv) = (val(*pre), val(*feedback));
            let mut dpre = grad.clone();
            let mut dfb = grad.clone();
            let mut dalpha = 0.0;
            for i in 0..pv.len() {
                let g = activation::fg_relu_grads(pv.data()[i], fv.data()[i], &params);
                dpre.data_mut()[i] *= g.d_mu_s;
                dfb.data_mut()[i] *= g.d_mu_d;
                dalpha += grad.data()[i] * g.d_alpha.unwrap_or(0.0);
            }
            push!(pre, dpre);
            push!(feedback, dfb);
            push!(alpha, Tensor::scalar(dalpha));
        }
        OpKind::GainOverride { pre, value } => {
            let pv = val(*pre);
            let units = *pv.shape().last().unwrap_or(&1);
            let mut d = grad.clone();
            for (i, g) in d.data_mut().iter_mut().enumerate() {
                let gain = match value {
                    GainValue::Constant(c) => *c,
                    GainValue::PerUnit(v) => v[i % units],
                };
                *g = if pv.data()[i] > 0.0 { *g * gain } else { 0.0 };
            }
            push!(pre, d);
        }
        OpKind::Conv2d { input, kernels, bias, stride, padding } => {
            let x = val(*input);
            let k = val(*kernels);
            let geom = ConvGeom::infer(&x.shape()[1..], k.shape(), *stride, *padding)?;
            let in_sz = geom.c_in * geom.h * geom.w;
            let out_sz = geom.c_out * geom.h_out * geom.w_out;
            let mut dx = Tensor::zeros(x.shape());
            let kd = k.data();
            // Per-sample kernel grads, reduced in fixed order for determinism.
            let per_sample: Vec<(Vec<Real>, Vec<Real>)> = dx
                .data_mut()
                .par_chunks_mut(in_sz)
                .zip(x.data().par_chunks(in_sz))
                .zip(grad.data().par_chunks(out_sz))
                .map(|((dxi, xi), gi)| {
                    let mut dk = vec![0.0; kd.len()];
                    let mut db = vec![0.0; geom.c_out];
                    conv2d_backward_sample(xi, kd, gi, &geom, dxi, &mut dk, Some(&mut db));
                    (dk, db)
                })
                .collect();
            let mut dk = Tensor::zeros(k.shape());
            let mut db = Tensor::zeros(&[geom.c_out]);
            for (dki, dbi) in &per_sample {
                for (a, b) in dk.data_mut().iter_mut().zip(dki) {
                    *a += b;
                }
                for (a, b) in db.data_mut().iter_mut().zip(dbi) {
                    *a += b;
                }
            }
            push!(input, dx);
            push!(kernels, dk);
            if let Some(bias) = bias {
                push!(bias, db);
            }
        }
        OpKind::Conv2dTranspose { input, kernels, bias, stride } => {
            let x = val(*input);
            let k = val(*kernels);
            let geom = ConvTransposeGeom::infer(&x.shape()[1..], k.shape(), *stride)?;
            let in_sz = geom.c_in * geom.h * geom.w;
            let out_sz = geom.c_out * geom.h_out * geom.w_out;
            let mut dx = Tensor::zeros(x.shape());
            let kd = k.data();
            let per_sample: Vec<(Vec<Real>, Vec<Real>)> = dx
                .data_mut()
                .par_chunks_mut(in_sz)
                .zip(x.data().par_chunks(in_sz))
                .zip(grad.data().par_chunks(out_sz))
                .map(|((dxi, xi), gi)| {
                    let mut dk = vec![0.0; kd.len()];
                    let mut db = vec![0.0; geom.c_out];
                    conv2d_transpose_backward_sample(xi, kd, gi, &geom, dxi, &mut dk, Some(&mut db));
                    (dk, db)
                })
                .collect();
            let mut dk = Tensor::zeros(k.shape());
            let mut db = Tensor::zeros(&[geom.c_out]);
            for (dki, dbi) in &per_sample {
                for (a, b) in dk.data_mut().iter_mut().zip(dki) {
                    *a += b;
                }
                for (a, b) in db.data_mut().iter_mut().zip(dbi) {
                    *a += b;
                }
            }
            push!(input, dx);
            push!(kernels, dk);
            if let Some(bias) = bias {
                push!(bias, db);
            }
        }
        OpKind::MaxPool2x2(input) => {
            let Aux::PoolIdx(idx) = aux else {
                return Err(Error::Graph("max_pool backward without forward".into()));
            };
            let mut dx = Tensor::zeros(val(*input).shape());
            for (&i, &g) in idx.iter().zip(grad.data()) {
                dx.data_mut()[i] += g;
            }
            push!(input, dx);
        }
        OpKind::ChannelMeans(input) => {
            let xs = val(*input).shape().to_vec();
            let plane = xs[2] * xs[3];
            let mut dx = Tensor::zeros(&xs);
            for (i, chunk) in dx.data_mut().chunks_mut(plane).enumerate() {
                let g = grad.data()[i] / plane as Real;
                chunk.fill(g);
            }
            push!(input, dx);
        }
        OpKind::BroadcastChannel { input, height, width } => {
            let plane = height * width;
            let mut dx = Tensor::zeros(val(*input).shape());
            for (i, chunk) in grad.data().chunks(plane).enumerate() {
                dx.data_mut()[i] = chunk.iter().sum();
            }
            push!(input, dx);
        }
        OpKind::BatchNorm { input, gamma, shift, mode, .. } => {
            let Aux::BnCache { inv_std, x_hat, .. } = aux else {
                return Err(Error::Graph("batch_norm backward without forward".into()));
            };
            let x = val(*input);
            let shape = x.shape().to_vec();
            let (channels, per_channel, ch_of) = bn_channel_of(&shape)?;
            let gm = val(*gamma);

            let mut dgamma = Tensor::zeros(&[channels]);
            let mut dshift = Tensor::zeros(&[channels]);
            for (i, &g) in grad.data().iter().enumerate() {
                let c = ch_of(&shape, i);
                dgamma.data_mut()[c] += g * x_hat.data()[i];
                dshift.data_mut()[c] += g;
            }

            let mut dx = Tensor::zeros(&shape);
            match mode {
                BnMode::Running { .. } => {
                    for (i, &g) in grad.data().iter().enumerate() {
                        let c = ch_of(&shape, i);
                        dx.data_mut()[i] = g * gm.data()[c] * inv_std[c];
                    }
                }
                BnMode::Batch => {
                    // Standard batch-statistics backward.
                    let m = per_channel as Real;
                    let mut sum_dxhat = vec![0.0; channels];
                    let mut sum_dxhat_xhat = vec![0.0; channels];
                    for (i, &g) in grad.data().iter().enumerate() {
                        let c = ch_of(&shape, i);
                        let dxh = g * gm.data()[c];
                        sum_dxhat[c] += dxh;
                        sum_dxhat_xhat[c] += dxh * x_hat.data()[i];
                    }
                    for (i, &g) in grad.data().iter().enumerate() {
                        let c = ch_of(&shape, i);
                        let dxh = g * gm.data()[c];
                        dx.data_mut()[i] = inv_std[c] / m
                            * (m * dxh - sum_dxhat[c] - x_hat.data()[i] * sum_dxhat_xhat[c]);
                    }
                }
            }
            push!(input, dx);
            push!(gamma, dgamma);
            push!(shift, dshift);
        }
        OpKind::Dropout { input, mask } => push!(input, grad.mul(mask)?),
        OpKind::AddConst { input, .. } => push!(input, grad.clone()),
        OpKind::Detach(_) => {}
        OpKind::Reshape { input, .. } => {
            let back = grad.reshape(val(*input).shape())?;
            push!(input, back);
        }
        OpKind::Mse { pred, target } => {
            let g = grad.item()?;
            let p = val(*pred);
            let n = p.len() as Real;
            let mut d = p.clone();
            for (dv, &t) in d.data_mut().iter_mut().zip(target.data()) {
                *dv = g * 2.0 * (*dv - t) / n;
            }
            push!(pred, d);
        }
        OpKind::Bce { pred, target } => {
            let g = grad.item()?;
            let p = val(*pred);
            let n = p.len() as Real;
            let mut d = p.clone();
            for (dv, &t) in d.data_mut().iter_mut().zip(target.data()) {
                let pc = dv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                *dv = g * (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
            }
            push!(pred, d);
        }
        OpKind::SoftmaxXent { logits, labels } => {
            let Aux::Probs(probs) = aux else {
                return Err(Error::Graph("softmax_xent backward without forward".into()));
            };
            let g = grad.item()?;
            let batch = labels.len();
            let classes = probs.shape()[1];
            let mut d = probs.clone();
            for (b, &label) in labels.iter().enumerate() {
                d.data_mut()[b * classes + label as usize] -= 1.0;
            }
            push!(logits, d.scale(g / batch as Real));
        }
    }
    Ok(())
}

/// Max relative error between analytic and central-difference gradients for
/// all entries of one parameter: `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn finite_diff_check(
    tape: &mut Tape,
    store: &mut ParamStore,
    param: ParamId,
    epsilon: Real,
) -> Result<Real> {
    let entries: Vec<usize> = (0..store.get(param).len()).collect();
    finite_diff_check_entries(tape, store, param, &entries, epsilon)
}

/// Same as [`finite_diff_check`] but restricted to chosen entries of the
/// parameter, for sampling large tensors.
pub fn finite_diff_check_entries(
    tape: &mut Tape,
    store: &mut ParamStore,
    param: ParamId,
    entries: &[usize],
    epsilon: Real,
) -> Result<Real> {
    if epsilon <= 0.0 {
        return Err(Error::Parameter(format!("epsilon must be > 0, got {epsilon}")));
    }
    tape.forward(store)?;
    let grads = tape.backward(store)?;
    let analytic = grads[param.index()]
        .clone()
        .ok_or_else(|| Error::Graph("parameter does not appear on the tape".into()))?;

    let mut max_rel: Real = 0.0;
    for &i in entries {
        let original = store.get(param).data()[i];
        store.get_mut(param).data_mut()[i] = original + epsilon;
        let f_plus = tape.forward(store)?.item()?;
        store.get_mut(param).data_mut()[i] = original - epsilon;
        let f_minus = tape.forward(store)?.item()?;
        store.get_mut(param).data_mut()[i] = original;
        let fd = (f_plus - f_minus) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    // Restore the unperturbed forward state.
    tape.forward(store)?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_tol() -> Real {
        if cfg!(feature = "single") {
            1e-3
        } else {
            1e-6
        }
    }

    #[test]
    fn forward_identity_and_square() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.placeholder("x");
        tape.set_output(x);
        tape.bind("x", Tensor::scalar(7.0)).unwrap();
        assert_eq!(tape.forward(&store).unwrap().item().unwrap(), 7.0);

        let mut tape = Tape::new();
        let x = tape.placeholder("x");
        let y = tape.mul(x, x);
        tape.set_output(y);
        tape.bind("x", Tensor::scalar(3.0)).unwrap();
        assert_eq!(tape.forward(&store).unwrap().item().unwrap(), 9.0);
    }

    #[test]
    fn forward_unbound_placeholder_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.placeholder("x");
        tape.set_output(x);
        assert!(matches!(tape.forward(&store), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_linear_and_square() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(5.0), true);
        let mut tape = Tape::new();
        let xn = tape.param(x);
        tape.set_output(xn);
        tape.forward(&store).unwrap();
        let grads = tape.backward(&store).unwrap();
        assert_eq!(grads[x.index()].as_ref().unwrap().item().unwrap(), 1.0);

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), true);
        let mut tape = Tape::new();
        let xn = tape.param(x);
        let y = tape.mul(xn, xn);
        tape.set_output(y);
        tape.forward(&store).unwrap();
        let grads = tape.backward(&store).unwrap();
        assert_eq!(grads[x.index()].as_ref().unwrap().item().unwrap(), 6.0);
        // Central finite difference oracle: ((3+h)² − (3−h)²)/2h = 6 exactly.
        let err = finite_diff_check(&mut tape, &mut store, x, 1e-4).unwrap();
        assert!(err < 1e-9 as Real);
    }

    #[test]
    fn backward_dead_relu() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(-1.0), true);
        let mut tape = Tape::new();
        let xn = tape.param(x);
        let y = tape.relu(xn);
        tape.set_output(y);
        tape.forward(&store).unwrap();
        let grads = tape.backward(&store).unwrap();
        assert_eq!(grads[x.index()].as_ref().unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), true);
        let mut tape = Tape::new();
        let wn = tape.param(w);
        tape.set_output(wn);
        tape.forward(&store).unwrap();
        assert!(matches!(tape.backward(&store), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_parameter_gradient_doubles_exactly() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(1.5), true);
        let x = Tensor::scalar(2.0);

        let single = {
            let mut tape = Tape::new();
            let wn = tape.param(w);
            let xn = tape.constant(x.clone());
            let y = tape.mul(wn, xn);
            tape.set_output(y);
            tape.forward(&store).unwrap();
            tape.backward(&store).unwrap()[w.index()].clone().unwrap()
        };
        let double = {
            let mut tape = Tape::new();
            let wn = tape.param(w);
            let xn = tape.constant(x);
            let y1 = tape.mul(wn, xn);
            let y2 = tape.mul(wn, xn);
            let y = tape.add(y1, y2);
            tape.set_output(y);
            tape.forward(&store).unwrap();
            tape.backward(&store).unwrap()[w.index()].clone().unwrap()
        };
        assert_eq!(double.item().unwrap(), 2.0 * single.item().unwrap());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.7, 0.1, -0.4]).unwrap(), true);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.9, -1.1]).unwrap());
        let wn = tape.param(w);
        let y = tape.matmul(x, wn);
        let s = tape.sigmoid(y);
        let loss = tape.mse(s, Tensor::new(vec![1, 3], vec![0.2, 0.4, 0.6]).unwrap());
        tape.set_output(loss);

        tape.forward(&store).unwrap();
        let g1 = tape.backward(&store).unwrap()[w.index()].clone().unwrap();
        tape.forward(&store).unwrap();
        let g2 = tape.backward(&store).unwrap()[w.index()].clone().unwrap();
        assert_eq!(g1, g2);
    }

    /// Builds a small two-layer ReLU regression tape and returns its params.
    fn two_layer_tape(store: &mut ParamStore) -> (Tape, Vec<ParamId>) {
        let w1 = store.add(
            "w1",
            Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7 % 11) as Real - 5.0) * 0.13).collect()).unwrap(),
            true,
        );
        let b1 = store.add("b1", Tensor::from_vec(vec![0.05, -0.02, 0.11, 0.4]), true);
        let w2 = store.add(
            "w2",
            Tensor::new(vec![4, 2], (0..8).map(|i| ((i * 5 % 7) as Real - 3.0) * 0.21).collect()).unwrap(),
            true,
        );
        let b2 = store.add("b2", Tensor::from_vec(vec![0.0, 0.3]), true);

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![0.8, -0.4, 0.9, 1.2, 0.3, -0.7]).unwrap());
        let w1n = tape.param(w1);
        let b1n = tape.param(b1);
        let h_pre = tape.matmul(x, w1n);
        let h_pre = tape.add_row(h_pre, b1n);
        let h = tape.relu(h_pre);
        let w2n = tape.param(w2);
        let b2n = tape.param(b2);
        let out = tape.matmul(h, w2n);
        let out = tape.add_row(out, b2n);
        let loss = tape.mse(out, Tensor::new(vec![2, 2], vec![0.1, 0.9, -0.5, 0.2]).unwrap());
        tape.set_output(loss);
        (tape, vec![w1, b1, w2, b2])
    }

    #[test]
    fn finite_diff_two_layer_relu_net() {
        let mut store = ParamStore::new();
        let (mut tape, params) = two_layer_tape(&mut store);
        for p in params {
            let err = finite_diff_check(&mut tape, &mut store, p, 1e-5).unwrap();
            assert!(err <= grad_tol(), "param {} rel err {err}", store.name(p));
        }
    }

    #[test]
    fn finite_diff_conv_pool_stack() {
        let mut store = ParamStore::new();
        let k = store.add(
            "k",
            Tensor::new(vec![2, 1, 2, 2], (0..8).map(|i| (i as Real - 3.5) * 0.2).collect()).unwrap(),
            true,
        );
        let kb = store.add("kb", Tensor::from_vec(vec![0.1, -0.1]), true);
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| ((i * 3 % 9) as Real) * 0.11 - 0.3).collect()).unwrap(),
        );
        let kn = tape.param(k);
        let kbn = tape.param(kb);
        let c = tape.conv2d(x, kn, Some(kbn), 1, Padding::Valid);
        let r = tape.relu(c);
        let p = tape.max_pool2x2(r);
        let target = Tensor::filled(&[1, 2, 1, 1], 0.25);
        let loss = tape.mse(p, target);
        tape.set_output(loss);

        for param in [k, kb] {
            let err = finite_diff_check(&mut tape, &mut store, param, 1e-5).unwrap();
            assert!(err <= grad_tol(), "param {} rel err {err}", store.name(param));
        }
    }

    #[test]
    fn finite_diff_conv_transpose_and_bn() {
        let mut store = ParamStore::new();
        let k = store.add(
            "k",
            Tensor::new(vec![1, 2, 2, 2], (0..8).map(|i| ((i * 3 % 5) as Real - 2.0) * 0.3).collect()).unwrap(),
            true,
        );
        let gamma = store.add("gamma", Tensor::from_vec(vec![1.2]), true);
        let shift = store.add("shift", Tensor::from_vec(vec![-0.1]), true);
        let mut tape = Tape::new();
        let x = tape.constant(
            Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| ((i * 5 % 13) as Real) * 0.17 - 1.0).collect()).unwrap(),
        );
        let kn = tape.param(k);
        let up = tape.conv2d_transpose(x, kn, None, 1);
        let gn = tape.param(gamma);
        let sn = tape.param(shift);
        let bn = tape.batch_norm(up, gn, sn, 1e-5, BnMode::Batch);
        let s = tape.sigmoid(bn);
        let loss = tape.mse(s, Tensor::filled(&[2, 1, 3, 3], 0.4));
        tape.set_output(loss);

        for param in [k, gamma, shift] {
            let err = finite_diff_check(&mut tape, &mut store, param, 1e-5).unwrap();
            assert!(err <= grad_tol(), "param {} rel err {err}", store.name(param));
        }
    }

    #[test]
    fn finite_diff_fg_relu_feedback_path() {
        // Two "passes": the gated unit consumes feedback computed from the
        // first pass's activation via a learned projection.
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], vec![0.6, -0.3, 0.2, 0.9]).unwrap(), true);
        let fb = store.add("fb", Tensor::new(vec![2, 2], vec![0.5, 0.25, -0.4, 0.75]).unwrap(), true);
        let params = FgReluParams::new(0.95, 5.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 2], vec![1.1, 0.4, 0.9, 1.6, 0.2, 0.8]).unwrap());
        let wn = tape.param(w);
        let fbn = tape.param(fb);
        // pass 1
        let pre1 = tape.matmul(x, wn);
        let h1 = tape.relu(pre1);
        // pass 2: same weights, gated by feedback from pass 1
        let pre2 = tape.matmul(x, wn);
        let mu_d = tape.matmul_bt(h1, fbn);
        let h2 = tape.fg_relu(pre2, mu_d, params);
        let loss = tape.mse(h2, Tensor::filled(&[3, 2], 0.7));
        tape.set_output(loss);

        for param in [w, fb] {
            let err = finite_diff_check(&mut tape, &mut store, param, 1e-5).unwrap();
            assert!(err <= grad_tol(), "param {} rel err {err}", store.name(param));
        }
    }

    #[test]
    fn finite_diff_threshold_alpha() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 2], vec![0.6, -0.3, 0.2, 0.9]).unwrap(), true);
        let alpha = store.add("alpha", Tensor::scalar(0.05), true);
        let params = FgReluParams::new(0.95, 5.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.1, 0.4, 0.9, 1.6]).unwrap());
        let wn = tape.param(w);
        let an = tape.param(alpha);
        let pre = tape.matmul(x, wn);
        let fbv = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.5, 3.0]).unwrap());
        let h = tape.fg_relu_threshold(pre, fbv, an, params);
        let loss = tape.mse(h, Tensor::filled(&[2, 2], 0.5));
        tape.set_output(loss);

        for param in [w, alpha] {
            let err = finite_diff_check(&mut tape, &mut store, param, 1e-5).unwrap();
            assert!(err <= grad_tol(), "param {} rel err {err}", store.name(param));
        }
    }

    #[test]
    fn detach_stops_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(2.0), true);
        let mut tape = Tape::new();
        let wn = tape.param(w);
        let d = tape.detach(wn);
        let y = tape.mul(d, wn); // only the direct path contributes
        tape.set_output(y);
        tape.forward(&store).unwrap();
        let grads = tape.backward(&store).unwrap();
        // d(detach(w)·w)/dw = detach(w) = 2, not 2w = 4.
        assert_eq!(grads[w.index()].as_ref().unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 10]));
        let loss = tape.softmax_xent(z, vec![3, 7]);
        tape.set_output(loss);
        let v = tape.forward(&store).unwrap().item().unwrap();
        assert!((v - (10.0 as Real).ln()).abs() < 1e-9 as Real);
    }

    #[test]
    fn bce_domain_error() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![0.5, 1.7]));
        let loss = tape.bce(p, Tensor::from_vec(vec![1.0, 0.0]));
        tape.set_output(loss);
        assert!(matches!(tape.forward(&store), Err(Error::Domain(_))));
    }
}
