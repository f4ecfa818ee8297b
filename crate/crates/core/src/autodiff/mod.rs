//! Reverse-mode differentiation over a dynamically built graph.
//!
//! Every forward op appends one node holding its output value. Nodes are only ever
//! appended, so creation order is a topological order and `backward` is a single
//! reverse sweep that visits each node once. Gradients are only materialised for
//! nodes that transitively depend on a leaf created with `requires_grad`.

mod capsule_ops;
mod conv;
mod elementwise;
mod loss_ops;
mod norm;
mod pool;

pub use capsule_ops::{coupling as capsule_coupling, RouteShape, SQUASH_EPS};
pub use conv::ConvSpec;
pub use norm::{BatchMoments, BN_EPS};
pub use pool::UpsampleMode;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Mul,
    Scale(T),
    Relu,
    Sigmoid,
    AddChannelBias,
    MulChannels,
    Concat { channels: Vec<usize> },
    Sum,
    Conv2d(ConvSpec),
    MaxPool2 { argmax: Vec<usize> },
    Upsample2(UpsampleMode),
    BatchNormTrain { mean: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { mean: Vec<T>, inv_std: Vec<T> },
    Squash { dim: usize },
    RouteSum { shape: RouteShape, coupling: Vec<T> },
    Agreement(RouteShape),
    BceWithLogits { targets: Tensor<T>, include: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of nodes for one forward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph in checked mode: any NaN/Inf produced by a forward op is an error.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn unchecked() -> Self {
        Graph {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Which branch every piecewise op took: the sign of each ReLU input and the
    /// winning index of each pooling window. Two evaluations with equal patterns
    /// lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    out.extend(x.data().iter().map(|&v| (v > T::zero()) as usize));
                }
                Op::MaxPool2 { argmax } => {
                    // exact ties (typically several dead ReLUs at 0) stay tied under
                    // perturbation and do not mark a branch
                    let x = &self.nodes[node.inputs[0].0].value;
                    let (h, w) = (x.shape()[2], x.shape()[3]);
                    let xd = x.data();
                    for &idx in argmax {
                        let (plane, r, c) = (idx / (h * w), ((idx / w) % h) & !1, (idx % w) & !1);
                        let top = plane * h * w + r * w + c;
                        let window = [top, top + 1, top + w, top + w + 1];
                        let ties = window.iter().filter(|&&k| xd[k] == xd[idx]).count();
                        out.push(if ties > 1 { usize::MAX } else { idx });
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::add(self.value(a), self.value(b))?;
        self.push("add", Op::Add, vec![a, b], out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = elementwise::mul(self.value(a), self.value(b))?;
        self.push("mul", Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let k = T::of(factor);
        let out = self.value(a).map(|v| v * k);
        self.push("scale", Op::Scale(k), vec![a], out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", Op::Relu, vec![a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elementwise::sigmoid);
        self.push("sigmoid", Op::Sigmoid, vec![a], out)
    }

    /// `x[n, c, h, w] + bias[c]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = elementwise::add_channel_bias(self.value(x), self.value(bias))?;
        self.push("add_channel_bias", Op::AddChannelBias, vec![x, bias], out)
    }

    /// `x[n, c, h, w] · a[n, 0, h, w]`: one spatial map applied to every channel.
    pub fn mul_channels(&mut self, x: Var, a: Var) -> Result<Var> {
        let out = elementwise::mul_channels(self.value(x), self.value(a))?;
        self.push("mul_channels", Op::MulChannels, vec![x, a], out)
    }

    /// Channel-axis concatenation of NCHW tensors, preserving operand order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let (out, channels) = elementwise::concat(&values)?;
        self.push("concat", Op::Concat { channels }, parts.to_vec(), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", Op::Sum, vec![a], out)
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, spec: ConvSpec) -> Result<Var> {
        let out = conv::forward(self.value(x), self.value(weight), spec)?;
        self.push("conv2d", Op::Conv2d(spec), vec![x, weight], out)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = pool::max_pool2(self.value(x))?;
        self.push("max_pool2", Op::MaxPool2 { argmax }, vec![x], out)
    }

    pub fn upsample2(&mut self, x: Var, mode: UpsampleMode) -> Result<Var> {
        let out = pool::upsample2(self.value(x), mode)?;
        self.push("upsample2", Op::Upsample2(mode), vec![x], out)
    }

    /// Batch normalization with batch statistics. Returns the biased batch moments so the
    /// caller can update its running estimates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchMoments<T>)> {
        let (out, moments, inv_std) =
            norm::forward_train(self.value(x), self.value(gamma), self.value(beta))?;
        let op = Op::BatchNormTrain {
            mean: moments.mean.clone(),
            inv_std,
        };
        let v = self.push("batch_norm", op, vec![x, gamma, beta], out)?;
        Ok((v, moments))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (out, inv_std) =
            norm::forward_eval(self.value(x), self.value(gamma), self.value(beta), mean, var)?;
        let op = Op::BatchNormEval {
            mean: mean.to_vec(),
            inv_std,
        };
        self.push("batch_norm", op, vec![x, gamma, beta], out)
    }

    /// Squash every `dim`-long capsule vector along axis 1.
    pub fn squash(&mut self, s: Var, dim: usize) -> Result<Var> {
        let out = capsule_ops::squash(self.value(s), dim)?;
        self.push("squash", Op::Squash { dim }, vec![s], out)
    }

    /// `s_j = Σ_i softmax_j(b_i)_j · û_{i→j}` at every position.
    pub fn route_sum(&mut self, votes: Var, logits: Var, shape: RouteShape) -> Result<Var> {
        let (out, coupling) = capsule_ops::route_sum(self.value(votes), self.value(logits), shape)?;
        self.push("route_sum", Op::RouteSum { shape, coupling }, vec![votes, logits], out)
    }

    /// `⟨û_{i→j}, v_j⟩` for every (child type, parent type) pair and position.
    pub fn agreement(&mut self, votes: Var, parents: Var, shape: RouteShape) -> Result<Var> {
        let out = capsule_ops::agreement(self.value(votes), self.value(parents), shape)?;
        self.push("agreement", Op::Agreement(shape), vec![votes, parents], out)
    }

    /// Sum-reduced binary cross entropy on logits. `include[n] == false` drops sample `n`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>, include: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        let include = match include {
            Some(mask) => mask.to_vec(),
            None => vec![true; x.shape()[0]],
        };
        let out = loss_ops::bce_forward(x, targets, &include)?;
        let op = Op::BceWithLogits {
            targets: targets.clone(),
            include,
        };
        self.push("bce_with_logits", op, vec![logits], out)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = self.vjp(node, &g, &needs);
            for ((input, grad), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(grad) = grad else { continue };
                debug_assert!(need);
                debug_assert_eq!(grad.shape(), self.nodes[input.0].value.shape());
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(grad),
                }
            }
        }
        // only leaves keep gradients; interior slots were consumed above
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
            Op::Mul => vec![
                needs[0].then(|| elementwise::mul(g, input(1)).expect("shapes checked in forward")),
                needs[1].then(|| elementwise::mul(g, input(0)).expect("shapes checked in forward")),
            ],
            Op::Scale(k) => vec![Some(g.map(|v| v * *k))],
            Op::Relu => vec![Some(elementwise::relu_backward(input(0), g))],
            Op::Sigmoid => vec![Some(elementwise::sigmoid_backward(y, g))],
            Op::AddChannelBias => vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| elementwise::channel_sums(g)),
            ],
            Op::MulChannels => {
                let (gx, ga) = elementwise::mul_channels_backward(input(0), input(1), g, needs[0], needs[1]);
                vec![gx, ga]
            }
            Op::Concat { channels } => elementwise::concat_backward(g, channels, needs),
            Op::Sum => vec![Some(Tensor::full(input(0).shape(), g.data()[0]))],
            Op::Conv2d(spec) => {
                let (gx, gw) = conv::backward(input(0), input(1), g, *spec, needs[0], needs[1]);
                vec![gx, gw]
            }
            Op::MaxPool2 { argmax } => vec![Some(pool::max_pool2_backward(input(0).shape(), argmax, g))],
            Op::Upsample2(mode) => vec![Some(pool::upsample2_backward(input(0).shape(), g, *mode))],
            Op::BatchNormTrain { mean, inv_std } => {
                norm::backward_train(input(0), input(1), mean, inv_std, g, needs)
            }
            Op::BatchNormEval { mean, inv_std } => {
                norm::backward_eval(input(0), input(1), mean, inv_std, g, needs)
            }
            Op::Squash { dim } => vec![Some(capsule_ops::squash_backward(input(0), *dim, g))],
            Op::RouteSum { shape, coupling } => {
                let (gv, gb) = capsule_ops::route_sum_backward(input(0), coupling, *shape, g, needs[0], needs[1]);
                vec![gv, gb]
            }
            Op::Agreement(shape) => {
                let (gu, gv) = capsule_ops::agreement_backward(input(0), input(1), *shape, g, needs[0], needs[1]);
                vec![gu, gv]
            }
            Op::BceWithLogits { targets, include } => {
                vec![Some(loss_ops::bce_backward(input(0), targets, include, g.data()[0]))]
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
