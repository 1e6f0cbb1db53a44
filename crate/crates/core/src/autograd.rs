//! Define-by-run reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! the information its backward rule needs. Nodes are only ever appended, so
//! inputs always precede their consumers and a reverse sweep over the node
//! list is a valid reverse topological order. A node consumed several times
//! receives the sum of its consumers' contributions; this is all that is
//! needed for parameters shared across recursive iterations.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;

use crate::error::{config_err, input_err, Error, Result};
use crate::kernels::{self, ConvSpec, Mode, NormCache};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv,
    NormTrain,
    NormInference,
    Relu,
    Sigmoid,
    Dropout,
    Pool,
    ChannelScale,
    Add,
    Mul,
    Reshape,
    Sum,
    CrossEntropy,
}

enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec },
    NormTrain { x: NodeId, gamma: NodeId, beta: NodeId, cache: NormCache },
    NormInference { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor, var: Tensor, eps: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout { x: NodeId, mask: Option<Tensor> },
    Pool(NodeId),
    ChannelScale { x: NodeId, s: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::NormTrain { .. } => OpKind::NormTrain,
            Op::NormInference { .. } => OpKind::NormInference,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Pool(_) => OpKind::Pool,
            Op::ChannelScale { .. } => OpKind::ChannelScale,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`] for every leaf that requires one.
#[derive(Clone, Debug)]
pub struct Gradients {
    leaves: BTreeMap<NodeId, Tensor>,
    params: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    /// Gradient for every parameter in `store`, zero for parameters the loss does not reach.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .map(|(id, p)| self.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
    backward_done: bool,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Makes the backward rule of `kind` deliberately wrong (input gradients
    /// scaled by 1.01). Exists so gradient checkers can be shown to catch it.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("node {} is not on this tape", id.0)));
        }
        Ok(())
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// One bit per ReLU output element in tape order, set where the output is
    /// positive. Two evaluations of the same graph with equal patterns have
    /// every ReLU on the same side of its kink.
    pub fn relu_pattern(&self) -> Vec<u64> {
        let mut bits = Vec::new();
        let mut n = 0usize;
        for node in self.nodes.iter().filter(|n| n.op.kind() == OpKind::Relu) {
            for &v in node.value.data() {
                if n.is_multiple_of(64) {
                    bits.push(0);
                }
                if v > 0.0 {
                    *bits.last_mut().expect("pushed above") |= 1 << (n % 64);
                }
                n += 1;
            }
        }
        bits.push(n as u64);
        bits
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a registered parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// The leaf for parameter `id`, created on first use and reused afterwards.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let n = self.leaf(store.get(id).clone());
        self.params.insert(id, n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = b {
            self.check(b)?;
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::Conv { x, w, b, spec }, rg))
    }

    /// Training-mode batchnorm; returns the node and the batch statistics so
    /// the caller can fold them into its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, kernels::BatchStats)> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let (out, stats, cache) = kernels::batch_norm_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok((self.push(out, Op::NormTrain { x, gamma, beta, cache }, rg), stats))
    }

    pub fn batch_norm_inference(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<NodeId> {
        for id in [x, gamma, beta] {
            self.check(id)?;
        }
        let out =
            kernels::batch_norm_inference(self.value(x), self.value(gamma), self.value(beta), mean, var, eps)?;
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::NormInference { x, gamma, beta, mean: mean.clone(), var: var.clone(), eps };
        Ok(self.push(out, op, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = kernels::relu(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = kernels::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn dropout(&mut self, x: NodeId, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<NodeId> {
        self.check(x)?;
        let (out, mask) = kernels::dropout(self.value(x), rate, mode, rng)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = kernels::adaptive_avg_pool_1x1(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Pool(x), rg))
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(s)?;
        let out = kernels::channel_scale(self.value(x), self.value(s))?;
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ChannelScale { x, s }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = kernels::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let out = kernels::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// Mean softmax cross-entropy of N×c logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let loss = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let probs = kernels::softmax_rows(self.value(logits))?;
        let rg = self.rg(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, rg))
    }

    /// Propagates `d loss / d node` from a scalar `loss` back to every leaf.
    ///
    /// A tape supports exactly one backward pass; a second call is an error
    /// rather than a silent doubling of accumulated gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        self.check(loss)?;
        if self.backward_done {
            return Err(input_err!("backward() already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(input_err!("loss must be a scalar, got shape {:?}", self.value(loss).shape()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut leaves = BTreeMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(NodeId(i), g);
                continue;
            }
            let corrupt = self.fault == Some(node.op.kind());
            for (input, mut contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(contribution.shape(), self.value(input).shape());
                if corrupt {
                    contribution = contribution.scale(1.01);
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let r = kernels::conv2d_backward(self.value(*x), self.value(*w), b.is_some(), needs(*x), *spec, g)?;
                if let Some(gx) = r.input {
                    out.push((*x, gx));
                }
                out.push((*w, r.weight));
                if let (Some(b), Some(gb)) = (b, r.bias) {
                    out.push((*b, gb));
                }
            }
            Op::NormTrain { x, gamma, beta, cache } => {
                let r = kernels::batch_norm_train_backward(cache, self.value(*gamma), g)?;
                out.extend([(*x, r.input), (*gamma, r.gamma), (*beta, r.beta)]);
            }
            Op::NormInference { x, gamma, mean, var, eps, beta } => {
                let r = kernels::batch_norm_inference_backward(self.value(*x), self.value(*gamma), mean, var, *eps, g)?;
                out.extend([(*x, r.input), (*gamma, r.gamma), (*beta, r.beta)]);
            }
            Op::Relu(x) => out.push((*x, kernels::relu_backward(self.value(*x), g)?)),
            Op::Sigmoid(x) => out.push((*x, kernels::sigmoid_backward(&node.value, g)?)),
            Op::Dropout { x, mask } => {
                let gx = match mask {
                    Some(m) => kernels::mul(g, m)?,
                    None => g.clone(),
                };
                out.push((*x, gx));
            }
            Op::Pool(x) => out.push((*x, kernels::adaptive_avg_pool_1x1_backward(self.value(*x).shape(), g)?)),
            Op::ChannelScale { x, s } => {
                let (gx, gs) = kernels::channel_scale_backward(self.value(*x), self.value(*s), g)?;
                out.extend([(*x, gx), (*s, gs)]);
            }
            Op::Add(a, b) => out.extend([(*a, g.clone()), (*b, g.clone())]),
            Op::Mul(a, b) => {
                out.push((*a, kernels::mul(g, self.value(*b))?));
                out.push((*b, kernels::mul(g, self.value(*a))?));
            }
            Op::Reshape(x) => out.push((*x, g.clone().reshape(self.value(*x).shape())?)),
            Op::Sum(x) => out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0]))),
            Op::CrossEntropy { logits, labels, probs } => {
                out.push((*logits, kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0])?));
            }
        }
        Ok(out)
    }
}

/// Builds a scalar-loss tape for `store` and returns the loss value with all parameter gradients.
pub fn value_and_grad(
    store: &ParamStore,
    f: impl FnOnce(&mut Tape, &ParamStore) -> Result<NodeId>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if tape.value(loss).numel() != 1 {
        return Err(config_err!("objective must produce a scalar"));
    }
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads.param_grads(store)))
}
