//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. `backward` walks the tape in reverse once.

use rand::Rng;

use super::tensor::Tensor;
use crate::exec::Exec;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Patchify { x: Var, patch: usize },
    PrependCls { tokens: Var, cls: Var },
    FoldTokens(Var),
    ClsOf(Var),
    Upsample { x: Var, factor: usize },
    SpatialMean(Var),
    SpatialMax { x: Var, argmax: Vec<usize> },
    ChannelScale { x: Var, s: Var },
    AddChannelVector { x: Var, v: Var },
    PhaseSlice { x: Var, start: usize },
    ClsGate { cls: Var, gate: Var, alpha: f64 },
    SoftmaxChannels(Var),
    PhaseDecode { a: Var, w: Var },
    TemporalAttention { qkv: Var, heads: usize, lse: Vec<f64> },
    SpatialAttention { qkv: Var, heads: usize, lse: Vec<f64> },
    LossRe { target: Var, pred: Var },
    LossSad { target: Var, pred: Var, bands: usize },
    LossSimplex { w: Var, anchors: Var },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients of a scalar with respect to the trainable leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Self { nodes: Vec::new(), exec }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p + q);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p - q);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |p, q| p * q);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Inverted dropout. Rate 0 is the identity and adds no node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let x = self.value(a);
        let v = Tensor::new(x.shape(), x.data().iter().zip(&mask).map(|(p, m)| p * m).collect());
        self.push(v, Op::Dropout(a, mask), &[a])
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar node. Only trainable leaves keep their gradient.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backward_node(i, &g, &mut grads);
            }
        }
        Gradients { grads }
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs_grad(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    let gb = zip_map(g, self.value(*b), |p, q| p * q);
                    self.accumulate(grads, *a, gb);
                }
                if self.needs_grad(*b) {
                    let ga = zip_map(g, self.value(*a), |p, q| p * q);
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape));
            }
            Op::LeakyRelu(a, slope) => {
                let gx = zip_map(g, self.value(*a), |d, x| if x > 0.0 { d } else { slope * d });
                self.accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => {
                let gx = zip_map(g, out, |d, y| d * y * (1.0 - y));
                self.accumulate(grads, *a, gx);
            }
            Op::Dropout(a, mask) => {
                let gx = Tensor::new(g.shape(), g.data().iter().zip(mask).map(|(d, m)| d * m).collect());
                self.accumulate(grads, *a, gx);
            }
            Op::WeightedSum(terms) => {
                let d = g.item();
                for &(v, c) in terms {
                    let shape = self.value(v).shape().to_vec();
                    self.accumulate(grads, v, Tensor::full(shape, d * c));
                }
            }
            Op::Linear { x, w, b } => super::ops::linear_backward(self, grads, g, *x, *w, *b),
            Op::Conv2d { x, w, b, pad } => super::conv::conv2d_backward(self, grads, g, *x, *w, *b, *pad),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                super::conv::batch_norm_backward(self, grads, g, *x, *gamma, *beta, xhat, inv_std)
            }
            Op::Patchify { x, patch } => super::ops::patchify_backward(self, grads, g, *x, *patch),
            Op::PrependCls { tokens, cls } => super::ops::prepend_cls_backward(self, grads, g, *tokens, *cls),
            Op::FoldTokens(x) => super::ops::fold_tokens_backward(self, grads, g, *x),
            Op::ClsOf(x) => super::ops::cls_of_backward(self, grads, g, *x),
            Op::Upsample { x, factor } => super::ops::upsample_backward(self, grads, g, *x, *factor),
            Op::SpatialMean(x) => super::ops::spatial_mean_backward(self, grads, g, *x),
            Op::SpatialMax { x, argmax } => super::ops::spatial_max_backward(self, grads, g, *x, argmax),
            Op::ChannelScale { x, s } => super::ops::channel_scale_backward(self, grads, g, *x, *s),
            Op::AddChannelVector { x, v } => super::ops::add_channel_vector_backward(self, grads, g, *x, *v),
            Op::PhaseSlice { x, start } => super::ops::phase_slice_backward(self, grads, g, *x, *start),
            Op::ClsGate { cls, gate, alpha } => super::ops::cls_gate_backward(self, grads, g, *cls, *gate, *alpha),
            Op::SoftmaxChannels(x) => super::ops::softmax_channels_backward(self, grads, g, out, *x),
            Op::PhaseDecode { a, w } => super::ops::phase_decode_backward(self, grads, g, *a, *w),
            Op::TemporalAttention { qkv, heads, lse } => {
                let gq = super::attention::temporal_backward(self.value(*qkv), out, lse, g, *heads);
                self.accumulate(grads, *qkv, gq);
            }
            Op::SpatialAttention { qkv, heads, lse } => {
                let gq = super::attention::spatial_backward(self.value(*qkv), out, lse, g, *heads, self.exec);
                self.accumulate(grads, *qkv, gq);
            }
            Op::LossRe { target, pred } => super::ops::loss_re_backward(self, grads, g, *target, *pred),
            Op::LossSad { target, pred, bands } => super::ops::loss_sad_backward(self, grads, g, *target, *pred, *bands),
            Op::LossSimplex { w, anchors } => super::ops::loss_simplex_backward(self, grads, g, *w, *anchors),
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect())
}
