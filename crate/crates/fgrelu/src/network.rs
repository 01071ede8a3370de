//! Architecture descriptions, top-down feedback topology, and unrolling into
//! a weight-shared feedforward tape.
//!
//! A network with feedback is trained by presenting the same input for `t`
//! passes: every pass reuses the same feedforward weights, and from the
//! second pass on each gated layer receives `μ_D` computed from the previous
//! pass's post-activation outputs of the layers its edges point to. The first
//! pass runs with zero feedback (gain 1).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{FgReluParams, GainValue};
use crate::autograd::{BnMode, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, ConvTransposeGeom, Padding, Tensor};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LayerKind {
    Dense { units: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: Padding },
    Conv2dTranspose { filters: usize, kernel: usize, stride: usize },
    MaxPool2x2,
    BatchNorm,
    Dropout,
}

impl LayerKind {
    /// Layers that carry weights and produce their own activations; only
    /// these can be feedback endpoints.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } | LayerKind::Conv2dTranspose { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    None,
    Relu,
    FgRelu,
    FgReluThreshold,
    Sigmoid,
    Softmax,
}

impl ActivationKind {
    /// Rectified activations whose gain feedback can modulate.
    pub fn is_gateable(&self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::FgRelu | ActivationKind::FgReluThreshold)
    }

    pub fn is_gated(&self) -> bool {
        matches!(self, ActivationKind::FgRelu | ActivationKind::FgReluThreshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn dense(units: usize, activation: ActivationKind) -> Self {
        LayerSpec { kind: LayerKind::Dense { units }, activation }
    }

    pub fn conv2d(filters: usize, kernel: usize, stride: usize, padding: Padding, activation: ActivationKind) -> Self {
        LayerSpec { kind: LayerKind::Conv2d { filters, kernel, stride, padding }, activation }
    }

    pub fn conv2d_transpose(filters: usize, kernel: usize, stride: usize, activation: ActivationKind) -> Self {
        LayerSpec { kind: LayerKind::Conv2dTranspose { filters, kernel, stride }, activation }
    }

    pub fn max_pool() -> Self {
        LayerSpec { kind: LayerKind::MaxPool2x2, activation: ActivationKind::None }
    }

    pub fn batch_norm() -> Self {
        LayerSpec { kind: LayerKind::BatchNorm, activation: ActivationKind::None }
    }

    pub fn dropout() -> Self {
        LayerSpec { kind: LayerKind::Dropout, activation: ActivationKind::None }
    }
}

/// One top-down connection: the `target` layer's gain is driven by the
/// `source` layer's previous-pass activations through a learned `n×m` weight
/// matrix (`n` target units/filters, `m` source units/filters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackEdge {
    pub source: usize,
    pub target: usize,
}

/// The unrollable architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Sample shape without the batch dimension: `[d]` or `[c, h, w]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub feedback_edges: Vec<FeedbackEdge>,
    pub timesteps: usize,
    pub fg_params: FgReluParams,
    #[serde(default)]
    pub dropout_rate: Real,
    /// When set, feedback reads previous-pass activations as constants
    /// (no gradient across the pass boundary).
    #[serde(default)]
    pub detach_feedback: bool,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 1 {
            return Err(Error::Spec("timesteps must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !self.feedback_edges.is_empty()
            && self.fg_params.gain_override.is_none()
            && self.timesteps < 2
        {
            return Err(Error::Spec(
                "feedback edges need at least two timesteps (feedback is computed on the first pass and used on later ones)".into(),
            ));
        }
        for edge in &self.feedback_edges {
            if edge.source >= self.layers.len() || edge.target >= self.layers.len() {
                return Err(Error::Spec(format!(
                    "feedback edge {}→{} references a missing layer",
                    edge.source, edge.target
                )));
            }
            if edge.source <= edge.target {
                return Err(Error::Spec(format!(
                    "feedback edge {}→{} is not top-down (source must come later in feedforward order)",
                    edge.source, edge.target
                )));
            }
            if !self.layers[edge.source].kind.is_parameterized()
                || !self.layers[edge.target].kind.is_parameterized()
            {
                return Err(Error::Spec(format!(
                    "feedback edge {}→{} must connect parameterized layers",
                    edge.source, edge.target
                )));
            }
            if !self.layers[edge.target].activation.is_gated() {
                return Err(Error::Spec(format!(
                    "feedback edge {}→{}: target layer activation must be a gated ReLU",
                    edge.source, edge.target
                )));
            }
        }
        self.layer_output_shapes()?;
        Ok(())
    }

    /// Per-layer output sample shapes (no batch dimension).
    pub fn layer_output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match &layer.kind {
                LayerKind::Dense { units } => vec![*units],
                LayerKind::Conv2d { filters, kernel, stride, padding } => {
                    let g = ConvGeom::infer(&cur, &[*filters, cur[0], *kernel, *kernel], *stride, *padding)
                        .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
                    vec![g.c_out, g.h_out, g.w_out]
                }
                LayerKind::Conv2dTranspose { filters, kernel, stride } => {
                    let g = ConvTransposeGeom::infer(&cur, &[*filters, cur[0], *kernel, *kernel], *stride)
                        .map_err(|e| Error::Spec(format!("layer {i}: {e}")))?;
                    vec![g.c_out, g.h_out, g.w_out]
                }
                LayerKind::MaxPool2x2 => {
                    if cur.len() != 3 || cur[1] < 2 || cur[2] < 2 {
                        return Err(Error::Spec(format!(
                            "layer {i}: max_pool needs a [C,H,W] input with H,W ≥ 2, got {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / 2, cur[2] / 2]
                }
                LayerKind::BatchNorm | LayerKind::Dropout => cur.clone(),
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// Unit count a layer contributes to feedback sizing: units for dense
    /// layers, filter count for conv layers.
    pub fn feedback_units(&self, layer: usize) -> Result<usize> {
        match &self.layers[layer].kind {
            LayerKind::Dense { units } => Ok(*units),
            LayerKind::Conv2d { filters, .. } | LayerKind::Conv2dTranspose { filters, .. } => Ok(*filters),
            other => Err(Error::Spec(format!(
                "layer {layer} ({other:?}) has no feedback units"
            ))),
        }
    }

    /// `n×m` weight shape of an edge: target units × source units.
    pub fn edge_shape(&self, edge: &FeedbackEdge) -> Result<(usize, usize)> {
        Ok((self.feedback_units(edge.target)?, self.feedback_units(edge.source)?))
    }

    /// Total feedback parameters added by the edges: `Σ n×m`.
    pub fn feedback_param_count(&self) -> Result<usize> {
        let mut total = 0;
        for e in &self.feedback_edges {
            let (n, m) = self.edge_shape(e)?;
            total += n * m;
        }
        Ok(total)
    }

    /// Drop every feedback edge and un-gate the activations: the twin
    /// network the paper compares against.
    pub fn without_feedback(&self) -> NetworkSpec {
        let mut spec = self.clone();
        spec.feedback_edges.clear();
        for layer in &mut spec.layers {
            if layer.activation.is_gated() {
                layer.activation = ActivationKind::Relu;
            }
        }
        spec
    }

    /// Switch the targets of the given edges to the gated activation.
    pub fn with_edges(mut self, edges: Vec<FeedbackEdge>) -> NetworkSpec {
        for e in &edges {
            if self.layers[e.target].activation == ActivationKind::Relu {
                self.layers[e.target].activation = ActivationKind::FgRelu;
            }
        }
        self.feedback_edges = edges;
        self
    }
}

/// Every possible top-down connection: one edge per (gateable target, any
/// parameterized layer later in feedforward order).
pub fn comprehensive_edges(layers: &[LayerSpec]) -> Vec<FeedbackEdge> {
    let mut edges = Vec::new();
    for (target, tl) in layers.iter().enumerate() {
        if !tl.kind.is_parameterized() || !tl.activation.is_gateable() {
            continue;
        }
        for (source, sl) in layers.iter().enumerate().skip(target + 1) {
            if sl.kind.is_parameterized() {
                edges.push(FeedbackEdge { source, target });
            }
        }
    }
    edges
}

/// Feedback projection `μ_D = W · h_source`.
///
/// A dense source of `[B,m]` (or `[m]`) activations feeds through directly;
/// a conv source of `[B,C,H,W]` (or `[C,H,W]`) is first reduced to per-filter
/// spatial means so every filter contributes one scalar. Returns `[B,n]`.
pub fn compute_feedback(weights: &Tensor, source_activations: &Tensor) -> Result<Tensor> {
    let pooled = pool_source(source_activations)?;
    pooled.matmul_bt(weights)
}

fn pool_source(source: &Tensor) -> Result<Tensor> {
    match source.rank() {
        1 => source.reshape(&[1, source.len()]),
        2 => Ok(source.clone()),
        3 | 4 => {
            let s = source.shape();
            let (batch, c, plane) = if source.rank() == 3 {
                (1, s[0], s[1] * s[2])
            } else {
                (s[0], s[1], s[2] * s[3])
            };
            let mut out = Tensor::zeros(&[batch, c]);
            for (i, chunk) in source.data().chunks(plane).enumerate() {
                out.data_mut()[i] = chunk.iter().sum::<Real>() / plane as Real;
            }
            Ok(out)
        }
        r => Err(Error::dim(format!("feedback source of rank {r} unsupported: {:?}", source.shape()))),
    }
}

/// Elementwise sum of the feedback contributions of several edges into one
/// target; zero when no edge is present.
pub fn sum_feedback(contributions: &[Tensor], units: usize, batch: usize) -> Result<Tensor> {
    let mut total = Tensor::zeros(&[batch, units]);
    for c in contributions {
        total = total.add(c)?;
    }
    Ok(total)
}

/// Per-dropout-layer masks for one batch, reused at every timestep.
/// Inverted-dropout scaling: kept entries are `1/(1−rate)`, dropped are 0.
pub fn shared_dropout_masks(
    spec: &NetworkSpec,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<usize, Tensor>> {
    if !(0.0..1.0).contains(&spec.dropout_rate) {
        return Err(Error::Parameter(format!(
            "dropout rate must lie in [0, 1), got {}",
            spec.dropout_rate
        )));
    }
    let shapes = spec.layer_output_shapes()?;
    let mut masks = BTreeMap::new();
    let keep = 1.0 - spec.dropout_rate;
    for (i, layer) in spec.layers.iter().enumerate() {
        if !matches!(layer.kind, LayerKind::Dropout) {
            continue;
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&shapes[i]);
        let mut mask = Tensor::zeros(&shape);
        for v in mask.data_mut().iter_mut() {
            *v = if (rng.random::<f64>() as Real) < keep { 1.0 / keep } else { 0.0 };
        }
        masks.insert(i, mask);
    }
    Ok(masks)
}

/// Parameter handles of one layer.
#[derive(Debug, Clone)]
enum LayerParams {
    Dense { w: ParamId, b: ParamId },
    Conv { k: ParamId, b: ParamId },
    BatchNorm { gamma: ParamId, shift: ParamId, run_mean: ParamId, run_var: ParamId },
    None,
}

/// Training target bound to one batch.
#[derive(Debug, Clone)]
pub enum Target {
    /// Reconstruction against this tensor with the given loss.
    Reconstruction { target: Tensor, loss: ReconLoss },
    /// Classification labels (softmax cross-entropy on the final logits).
    Labels(Vec<u8>),
    /// No loss node; the tape output is the final pass's activations.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLoss {
    Mse,
    Bce,
}

/// Everything needed to materialize one batch's tape.
pub struct UnrollCtx<'a> {
    pub input: Tensor,
    pub target: Target,
    pub train: bool,
    /// Masks from [`shared_dropout_masks`]; required when training a spec
    /// with dropout layers and a nonzero rate.
    pub dropout_masks: Option<&'a BTreeMap<usize, Tensor>>,
    /// Evaluation-time Gaussian noise injected into every hidden layer's
    /// pre-activations in every pass.
    pub noise: Option<(Real, &'a mut ChaCha8Rng)>,
    /// Probe override: replace one layer's activation with a fixed gain.
    pub layer_override: Option<(usize, GainValue)>,
}

/// A gated layer's feedback node on one pass, for gate-record collection.
#[derive(Debug, Clone, Copy)]
pub struct GateTap {
    pub layer: usize,
    pub pass: usize,
    /// `[B, n]` feedback values (per filter for conv targets).
    pub mu_d: NodeId,
}

/// The tape of an unrolled network plus the handles experiments need.
pub struct Unrolled {
    pub tape: Tape,
    /// Final-layer output node per pass.
    pub pass_outputs: Vec<NodeId>,
    pub gate_taps: Vec<GateTap>,
    /// Batch-norm nodes per layer occurrence, for running-stat updates.
    pub bn_nodes: Vec<(usize, NodeId)>,
}

/// A materialized network: spec plus parameter state.
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    layer_params: Vec<LayerParams>,
    edge_params: Vec<ParamId>,
    alpha_param: Option<ParamId>,
}

/// Momentum of the running-statistics update used by batch norm.
const BN_MOMENTUM: Real = 0.9;
const BN_EPS: Real = 1e-5;

/// How one parameter slot is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
enum SlotInit {
    UniformFanIn(usize),
    Zeros,
    Ones,
}

/// One entry of a spec's canonical parameter layout.
struct SlotDesc {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    init: SlotInit,
}

/// Canonical parameter layout of a spec. Feedforward slots come first so
/// their random draws are identical with and without feedback edges (which
/// are zero-initialized and consume no randomness); alpha comes last.
fn param_layout(spec: &NetworkSpec) -> Result<(Vec<SlotDesc>, Vec<LayerSlots>, usize, bool)> {
    let shapes = spec.layer_output_shapes()?;
    let mut slots = Vec::new();
    let mut layer_slots = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let in_shape = if i == 0 { &spec.input_shape } else { &shapes[i - 1] };
        let ls = match &layer.kind {
            LayerKind::Dense { units } => {
                let fan_in: usize = in_shape.iter().product();
                slots.push(SlotDesc {
                    name: format!("layer{i}.w"),
                    shape: vec![fan_in, *units],
                    trainable: true,
                    init: SlotInit::UniformFanIn(fan_in),
                });
                slots.push(SlotDesc {
                    name: format!("layer{i}.b"),
                    shape: vec![*units],
                    trainable: true,
                    init: SlotInit::Zeros,
                });
                LayerSlots::Dense
            }
            LayerKind::Conv2d { filters, kernel, .. }
            | LayerKind::Conv2dTranspose { filters, kernel, .. } => {
                let c_in = in_shape[0];
                let fan_in = c_in * kernel * kernel;
                slots.push(SlotDesc {
                    name: format!("layer{i}.k"),
                    shape: vec![*filters, c_in, *kernel, *kernel],
                    trainable: true,
                    init: SlotInit::UniformFanIn(fan_in),
                });
                slots.push(SlotDesc {
                    name: format!("layer{i}.b"),
                    shape: vec![*filters],
                    trainable: true,
                    init: SlotInit::Zeros,
                });
                LayerSlots::Conv
            }
            LayerKind::BatchNorm => {
                let channels = in_shape[0];
                for (suffix, trainable, init) in [
                    ("bn_gamma", true, SlotInit::Ones),
                    ("bn_shift", true, SlotInit::Zeros),
                    ("bn_mean", false, SlotInit::Zeros),
                    ("bn_var", false, SlotInit::Ones),
                ] {
                    slots.push(SlotDesc {
                        name: format!("layer{i}.{suffix}"),
                        shape: vec![channels],
                        trainable,
                        init,
                    });
                }
                LayerSlots::BatchNorm
            }
            LayerKind::MaxPool2x2 | LayerKind::Dropout => LayerSlots::None,
        };
        layer_slots.push(ls);
    }
    let edge_count = spec.feedback_edges.len();
    for edge in &spec.feedback_edges {
        let (n, m) = spec.edge_shape(edge)?;
        slots.push(SlotDesc {
            name: format!("feedback{}to{}", edge.source, edge.target),
            shape: vec![n, m],
            trainable: true,
            init: SlotInit::Zeros,
        });
    }
    let uses_threshold = spec
        .layers
        .iter()
        .any(|l| l.activation == ActivationKind::FgReluThreshold);
    if uses_threshold {
        slots.push(SlotDesc {
            name: "alpha".into(),
            shape: vec![1],
            trainable: true,
            init: SlotInit::Zeros,
        });
    }
    Ok((slots, layer_slots, edge_count, uses_threshold))
}

#[derive(Debug, Clone, Copy)]
enum LayerSlots {
    Dense,
    Conv,
    BatchNorm,
    None,
}

impl Network {
    /// Initialize parameters: uniform fan-in-scaled feedforward weights,
    /// zero biases, zero feedback edges (training starts exactly at the
    /// no-feedback baseline), zero alpha.
    pub fn new(spec: NetworkSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let (slots, layer_slots, edge_count, uses_threshold) = param_layout(&spec)?;
        let mut params = ParamStore::new();
        let mut ids = Vec::with_capacity(slots.len());
        for slot in &slots {
            let tensor = match slot.init {
                SlotInit::Zeros => Tensor::zeros(&slot.shape),
                SlotInit::Ones => Tensor::ones(&slot.shape),
                SlotInit::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as Real).sqrt();
                    let mut t = Tensor::zeros(&slot.shape);
                    for v in t.data_mut().iter_mut() {
                        *v = (rng.random::<f64>() as Real) * 2.0 * bound - bound;
                    }
                    t
                }
            };
            ids.push(params.add(slot.name.clone(), tensor, slot.trainable));
        }
        Self::assemble(spec, params, ids, layer_slots, edge_count, uses_threshold)
    }

    /// Rebuild a network around an existing parameter store (checkpoint
    /// loading). The store must follow the spec's canonical layout.
    pub fn from_parts(spec: NetworkSpec, params: ParamStore) -> Result<Self> {
        spec.validate()?;
        let (slots, layer_slots, edge_count, uses_threshold) = param_layout(&spec)?;
        if params.len() != slots.len() {
            return Err(Error::Spec(format!(
                "parameter store has {} entries, spec expects {}",
                params.len(),
                slots.len()
            )));
        }
        let mut ids = Vec::with_capacity(slots.len());
        for (id, slot) in params.ids().zip(&slots) {
            if params.name(id) != slot.name || params.get(id).shape() != slot.shape.as_slice() {
                return Err(Error::Spec(format!(
                    "parameter {} (`{}`, {:?}) does not match the spec layout (`{}`, {:?})",
                    id.index(),
                    params.name(id),
                    params.get(id).shape(),
                    slot.name,
                    slot.shape
                )));
            }
            ids.push(id);
        }
        Self::assemble(spec, params, ids, layer_slots, edge_count, uses_threshold)
    }

    fn assemble(
        spec: NetworkSpec,
        params: ParamStore,
        ids: Vec<ParamId>,
        layer_slots: Vec<LayerSlots>,
        edge_count: usize,
        uses_threshold: bool,
    ) -> Result<Self> {
        let mut next = 0usize;
        let mut take = || {
            let id = ids[next];
            next += 1;
            id
        };
        let mut layer_params = Vec::with_capacity(layer_slots.len());
        for ls in &layer_slots {
            layer_params.push(match ls {
                LayerSlots::Dense => LayerParams::Dense { w: take(), b: take() },
                LayerSlots::Conv => LayerParams::Conv { k: take(), b: take() },
                LayerSlots::BatchNorm => LayerParams::BatchNorm {
                    gamma: take(),
                    shift: take(),
                    run_mean: take(),
                    run_var: take(),
                },
                LayerSlots::None => LayerParams::None,
            });
        }
        let edge_params: Vec<ParamId> = (0..edge_count).map(|_| take()).collect();
        let alpha_param = uses_threshold.then(&mut take);
        Ok(Network { spec, params, layer_params, edge_params, alpha_param })
    }

    /// Trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.params.trainable_len()
    }

    pub fn edge_param_ids(&self) -> &[ParamId] {
        &self.edge_params
    }

    pub fn alpha_param(&self) -> Option<ParamId> {
        self.alpha_param
    }

    /// Unroll the network over `timesteps` passes into a fresh tape for one
    /// batch. The same input is presented at every pass; pass `p ≥ 2` feeds
    /// each gated layer the feedback computed from pass `p−1`.
    pub fn unroll(&self, ctx: &mut UnrollCtx) -> Result<Unrolled> {
        let spec = &self.spec;
        let t = spec.timesteps;
        if !spec.feedback_edges.is_empty() && spec.fg_params.gain_override.is_none() && t < 2 {
            return Err(Error::Spec(
                "unroll: feedback edges with a single timestep and no gain override".into(),
            ));
        }
        let shapes = spec.layer_output_shapes()?;
        let batch = ctx.input.shape()[0];
        let last_param_layer = spec
            .layers
            .iter()
            .rposition(|l| l.kind.is_parameterized())
            .ok_or_else(|| Error::Spec("network has no parameterized layer".into()))?;

        let mut tape = Tape::new();
        let input = tape.placeholder("input");
        tape.bind("input", ctx.input.clone())?;

        // Edges grouped by target for feedback summation.
        let mut edges_into: BTreeMap<usize, Vec<(usize, ParamId)>> = BTreeMap::new();
        for (edge, pid) in spec.feedback_edges.iter().zip(&self.edge_params) {
            edges_into.entry(edge.target).or_default().push((edge.source, *pid));
        }

        let mut pass_outputs = Vec::with_capacity(t);
        let mut gate_taps = Vec::new();
        let mut bn_nodes = Vec::new();
        // Post-activation node of each parameterized layer, previous pass.
        let mut prev_acts: Vec<Option<NodeId>> = vec![None; spec.layers.len()];

        for pass in 0..t {
            let mut h = input;
            let mut cur_shape = spec.input_shape.clone();
            let mut acts_this_pass: Vec<Option<NodeId>> = vec![None; spec.layers.len()];

            for (l, layer) in spec.layers.iter().enumerate() {
                // Pre-activation.
                let mut pre = match (&layer.kind, &self.layer_params[l]) {
                    (LayerKind::Dense { .. }, LayerParams::Dense { w, b }) => {
                        if cur_shape.len() > 1 {
                            let flat: usize = cur_shape.iter().product();
                            h = tape.reshape(h, vec![batch, flat]);
                        }
                        let wn = tape.param(*w);
                        let bn = tape.param(*b);
                        let mm = tape.matmul(h, wn);
                        tape.add_row(mm, bn)
                    }
                    (LayerKind::Conv2d { stride, padding, .. }, LayerParams::Conv { k, b }) => {
                        let kn = tape.param(*k);
                        let bn = tape.param(*b);
                        tape.conv2d(h, kn, Some(bn), *stride, *padding)
                    }
                    (LayerKind::Conv2dTranspose { stride, .. }, LayerParams::Conv { k, b }) => {
                        let kn = tape.param(*k);
                        let bn = tape.param(*b);
                        tape.conv2d_transpose(h, kn, Some(bn), *stride)
                    }
                    (LayerKind::MaxPool2x2, _) => tape.max_pool2x2(h),
                    (LayerKind::BatchNorm, LayerParams::BatchNorm { gamma, shift, run_mean, run_var }) => {
                        let gn = tape.param(*gamma);
                        let sn = tape.param(*shift);
                        let mode = if ctx.train {
                            BnMode::Batch
                        } else {
                            BnMode::Running {
                                mean: self.params.get(*run_mean).data().to_vec(),
                                var: self.params.get(*run_var).data().to_vec(),
                            }
                        };
                        let node = tape.batch_norm(h, gn, sn, BN_EPS, mode);
                        if ctx.train {
                            bn_nodes.push((l, node));
                        }
                        node
                    }
                    (LayerKind::Dropout, _) => {
                        if ctx.train && spec.dropout_rate > 0.0 {
                            let masks = ctx.dropout_masks.ok_or_else(|| {
                                Error::Graph("training a dropout network requires shared masks".into())
                            })?;
                            let mask = masks.get(&l).ok_or_else(|| {
                                Error::Graph(format!("no dropout mask for layer {l}"))
                            })?;
                            tape.dropout(h, mask.clone())
                        } else {
                            h
                        }
                    }
                    (kind, params) => {
                        return Err(Error::Spec(format!(
                            "layer {l}: inconsistent kind/params ({kind:?} vs {params:?})"
                        )))
                    }
                };

                // Evaluation noise on hidden pre-activations, fresh per pass.
                if layer.kind.is_parameterized() && l != last_param_layer {
                    if let Some((sigma, rng)) = ctx.noise.as_mut() {
                        if *sigma > 0.0 {
                            let mut shape = vec![batch];
                            shape.extend_from_slice(&shapes[l]);
                            let noise = gaussian_tensor(&shape, *sigma, rng);
                            pre = tape.add_const(pre, noise);
                        }
                    }
                }

                // Activation.
                let out = self.apply_activation(
                    &mut tape,
                    ctx,
                    layer,
                    l,
                    pass,
                    pre,
                    &shapes,
                    &edges_into,
                    &prev_acts,
                    &mut gate_taps,
                )?;

                if layer.kind.is_parameterized() {
                    acts_this_pass[l] = Some(out);
                }
                cur_shape = shapes[l].clone();
                h = out;
            }

            pass_outputs.push(h);
            prev_acts = acts_this_pass;
        }

        let final_out = *pass_outputs.last().expect("at least one pass");
        let output_node = match &ctx.target {
            Target::Reconstruction { target, loss } => match loss {
                ReconLoss::Mse => tape.mse(final_out, target.clone()),
                ReconLoss::Bce => tape.bce(final_out, target.clone()),
            },
            Target::Labels(labels) => tape.softmax_xent(final_out, labels.clone()),
            Target::None => final_out,
        };
        tape.set_output(output_node);

        Ok(Unrolled { tape, pass_outputs, gate_taps, bn_nodes })
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_activation(
        &self,
        tape: &mut Tape,
        ctx: &UnrollCtx,
        layer: &LayerSpec,
        l: usize,
        pass: usize,
        pre: NodeId,
        shapes: &[Vec<usize>],
        edges_into: &BTreeMap<usize, Vec<(usize, ParamId)>>,
        prev_acts: &[Option<NodeId>],
        gate_taps: &mut Vec<GateTap>,
    ) -> Result<NodeId> {
        let out_shape = &shapes[l];
        // A probe override on this layer wins over everything else.
        if let Some((probe_layer, value)) = &ctx.layer_override {
            if *probe_layer == l && layer.activation.is_gateable() {
                return Ok(tape.gain_override(pre, value.clone()));
            }
        }
        match layer.activation {
            ActivationKind::None | ActivationKind::Softmax => Ok(pre),
            ActivationKind::Sigmoid => Ok(tape.sigmoid(pre)),
            ActivationKind::Relu => Ok(tape.relu(pre)),
            ActivationKind::FgRelu | ActivationKind::FgReluThreshold => {
                // The network-level override bypasses feedback entirely.
                if let Some(value) = &self.spec.fg_params.gain_override {
                    return Ok(tape.gain_override(pre, value.clone()));
                }
                let edges = edges_into.get(&l);
                // First pass, or nothing feeding this layer: β(0) = 0, so the
                // gated unit is exactly a ReLU.
                if pass == 0 || edges.is_none_or(|e| e.is_empty()) {
                    return Ok(tape.relu(pre));
                }
                let edges = edges.expect("checked above");

                // μ_D: sum of per-edge projections from previous-pass sources.
                let mut mu_d: Option<NodeId> = None;
                for (source, pid) in edges {
                    let src_act = prev_acts[*source].ok_or_else(|| {
                        Error::Graph(format!("no previous-pass activation for layer {source}"))
                    })?;
                    let src_act = if self.spec.detach_feedback {
                        tape.detach(src_act)
                    } else {
                        src_act
                    };
                    let pooled = if shapes[*source].len() == 3 {
                        tape.channel_means(src_act)
                    } else {
                        src_act
                    };
                    let wn = tape.param(*pid);
                    let contribution = tape.matmul_bt(pooled, wn);
                    mu_d = Some(match mu_d {
                        None => contribution,
                        Some(acc) => tape.add(acc, contribution),
                    });
                }
                let mu_d = mu_d.expect("at least one edge");
                gate_taps.push(GateTap { layer: l, pass, mu_d });

                // Conv targets share one feedback value across all spatial
                // units of a filter.
                let mu_d_full = if out_shape.len() == 3 {
                    tape.broadcast_channel(mu_d, out_shape[1], out_shape[2])
                } else {
                    mu_d
                };

                match layer.activation {
                    ActivationKind::FgRelu => Ok(tape.fg_relu(pre, mu_d_full, self.spec.fg_params.clone())),
                    ActivationKind::FgReluThreshold => {
                        let alpha = self.alpha_param.ok_or_else(|| {
                            Error::Spec("threshold activation without alpha parameter".into())
                        })?;
                        let an = tape.param(alpha);
                        Ok(tape.fg_relu_threshold(pre, mu_d_full, an, self.spec.fg_params.clone()))
                    }
                    _ => unreachable!(),
                }
            }
        }
    }

    /// Fold the batch statistics the tape's batch-norm nodes just computed
    /// into the running statistics.
    pub fn update_bn_running_stats(&mut self, unrolled: &Unrolled) {
        for (layer, node) in &unrolled.bn_nodes {
            let Some((mean, var)) = unrolled.tape.bn_batch_stats(*node) else { continue };
            let LayerParams::BatchNorm { run_mean, run_var, .. } = self.layer_params[*layer] else {
                continue;
            };
            let (mean, var) = (mean.to_vec(), var.to_vec());
            for (slot, m) in self.params.get_mut(run_mean).data_mut().iter_mut().zip(mean) {
                *slot = BN_MOMENTUM * *slot + (1.0 - BN_MOMENTUM) * m;
            }
            for (slot, v) in self.params.get_mut(run_var).data_mut().iter_mut().zip(var) {
                *slot = BN_MOMENTUM * *slot + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Forward evaluation of one batch; returns the final pass's output.
    pub fn forward_eval(&self, input: Tensor) -> Result<Tensor> {
        let mut ctx = UnrollCtx {
            input,
            target: Target::None,
            train: false,
            dropout_masks: None,
            noise: None,
            layer_override: None,
        };
        let mut unrolled = self.unroll(&mut ctx)?;
        unrolled.tape.forward(&self.params)
    }
}

pub(crate) fn gaussian_tensor(shape: &[usize], sigma: Real, rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, sigma as f64).expect("sigma validated by caller");
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut().iter_mut() {
        *v = normal.sample(rng) as Real;
    }
    t
}
