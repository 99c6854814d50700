//! Reverse-mode automatic differentiation over a linear record of executed
//! primitives.
//!
//! A [`Tape`] is append-only: every primitive evaluates eagerly, stores its
//! value, and remembers which nodes it consumed, so node order is a valid
//! topological order. [`Tape::backward`] replays the record in reverse and
//! returns gradients for every node that requires one.
//!
//! Backward rules of the elementwise activations can be overridden per
//! [`UnaryKind`] through a [`BackwardHookSet`]; guided backpropagation is
//! implemented that way.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Conv2dGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives whose backward rule may be replaced by a hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnaryKind {
    Relu,
    Silu,
    Sigmoid,
    Exp,
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => ops::relu(x),
            UnaryKind::Silu => ops::silu(x),
            UnaryKind::Sigmoid => ops::sigmoid(x),
            UnaryKind::Exp => x.exp(),
        }
    }

    /// The true local derivative, expressed through the forward input `x`
    /// and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Silu => ops::silu_derivative(x),
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Exp => y,
        }
    }
}

/// Replacement backward rule: `(forward input, forward output, upstream) -> input gradient`.
pub type UnaryBackwardRule = Arc<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor + Send + Sync>;

/// Per-kind overrides of elementwise backward rules. Empty by default.
#[derive(Clone, Default)]
pub struct BackwardHookSet {
    rules: BTreeMap<UnaryKind, UnaryBackwardRule>,
}

impl BackwardHookSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rule(mut self, kind: UnaryKind, rule: UnaryBackwardRule) -> Self {
        self.rules.insert(kind, rule);
        self
    }

    pub fn rule(&self, kind: UnaryKind) -> Option<&UnaryBackwardRule> {
        self.rules.get(&kind)
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl fmt::Debug for BackwardHookSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.rules.keys()).finish()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: Conv2dGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Unary {
        kind: UnaryKind,
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Softmax {
        input: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
        channels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record: values and ops in execution order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of recorded elementwise ops of the given kind.
    pub fn count_unary(&self, kind: UnaryKind) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Unary { kind: k, .. } if k == kind))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = Conv2dGeometry::infer(
            self.value(input).shape(),
            self.value(kernel).shape(),
            bias.map(|b| self.value(b).shape()),
            stride,
            padding,
        )?;
        let value = ops::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            &inputs,
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::dense_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(value, Op::Dense { input, weight, bias }, &inputs))
    }

    pub fn unary(&mut self, kind: UnaryKind, input: Var) -> Var {
        let value = self.value(input).map(|x| kind.apply(x));
        self.push(value, Op::Unary { kind, input }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Relu, input)
    }

    pub fn silu(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Silu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, input)
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(UnaryKind::Exp, input)
    }

    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let (value, argmax) = ops::max_pool_forward(self.value(input), window, stride)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn softmax(&mut self, input: Var) -> Var {
        let value = ops::softmax_forward(self.value(input));
        self.push(value, Op::Softmax { input }, &[input])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input), &[input])
    }

    /// `scale * x + shift`, elementwise with scalar constants.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(input).map(|x| scale * x + shift);
        self.push(value, Op::Affine { input, scale }, &[input])
    }

    /// Picks elements by flat offset into a rank-1 tensor of length `indices.len()`.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(input);
        if indices.is_empty() {
            return Err(Error::InvalidArgument("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {} elements",
                src.numel()
            )));
        }
        let value = Tensor::from_vec(indices.iter().map(|&i| src.data()[i]).collect());
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = ops::concat_channels(&parts)?;
        let channels = parts.iter().map(|p| p.shape()[1]).collect();
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
            inputs,
        ))
    }

    /// Backward pass with the true gradient rules.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.backward_with_hooks(output, seed, &BackwardHookSet::default())
    }

    pub fn backward_with_hooks(
        &self,
        output: Var,
        seed: Tensor,
        hooks: &BackwardHookSet,
    ) -> Result<Gradients> {
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(Error::shape("backward seed", out_shape, seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(upstream);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    geometry,
                } => {
                    if needs(*input) {
                        let g = ops::conv2d_backward_input(&upstream, self.value(*kernel), geometry);
                        accumulate(&mut grads, *input, g);
                    }
                    if needs(*kernel) {
                        let g =
                            ops::conv2d_backward_kernel(&upstream, self.value(*input), geometry);
                        accumulate(&mut grads, *kernel, g);
                    }
                    if let Some(b) = bias.filter(|&b| needs(b)) {
                        accumulate(&mut grads, b, ops::bias_backward(&upstream, 1));
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    if needs(*input) {
                        let g = ops::dense_backward_input(&upstream, self.value(*weight));
                        accumulate(&mut grads, *input, g);
                    }
                    if needs(*weight) {
                        let g = ops::dense_backward_weight(&upstream, self.value(*input));
                        accumulate(&mut grads, *weight, g);
                    }
                    if let Some(b) = bias.filter(|&b| needs(b)) {
                        accumulate(&mut grads, b, ops::bias_backward(&upstream, 1));
                    }
                }
                Op::Unary { kind, input } => {
                    if needs(*input) {
                        let x = self.value(*input);
                        let g = match hooks.rule(*kind) {
                            Some(rule) => {
                                let g = rule(x, &node.value, &upstream);
                                if g.shape() != x.shape() {
                                    return Err(Error::shape(
                                        format!("{kind:?} backward hook"),
                                        x.shape(),
                                        g.shape(),
                                    ));
                                }
                                g
                            }
                            None => {
                                let data = x
                                    .data()
                                    .iter()
                                    .zip(node.value.data())
                                    .zip(upstream.data())
                                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                                    .collect();
                                Tensor::from_parts(x.shape().to_vec(), data)
                            }
                        };
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    if needs(*input) {
                        let g =
                            ops::max_pool_backward(&upstream, argmax, self.value(*input).shape());
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Softmax { input } => {
                    if needs(*input) {
                        accumulate(&mut grads, *input, ops::softmax_backward(&upstream, &node.value));
                    }
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, upstream.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads, *a, upstream);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let g = upstream.zip_map(self.value(*b), |u, y| u * y)?;
                        accumulate(&mut grads, *a, g);
                    }
                    if needs(*b) {
                        let g = upstream.zip_map(self.value(*a), |u, x| u * x)?;
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sum(input) => {
                    if needs(*input) {
                        let g = Tensor::full(self.value(*input).shape(), upstream.data()[0]);
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Affine { input, scale } => {
                    if needs(*input) {
                        accumulate(&mut grads, *input, upstream.map(|u| u * scale));
                    }
                }
                Op::Gather { input, indices } => {
                    if needs(*input) {
                        let mut g = Tensor::zeros(self.value(*input).shape());
                        for (&i, &u) in indices.iter().zip(upstream.data()) {
                            g.data_mut()[i] += u;
                        }
                        accumulate(&mut grads, *input, g);
                    }
                }
                Op::Reshape { input } => {
                    if needs(*input) {
                        let shape = self.value(*input).shape().to_vec();
                        accumulate(&mut grads, *input, Tensor::from_parts(shape, upstream.into_data()));
                    }
                }
                Op::Concat { inputs, channels } => {
                    for (v, g) in inputs.iter().zip(ops::split_channels(&upstream, channels)) {
                        if needs(*v) {
                            accumulate(&mut grads, *v, g);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shapes agree with node shapes"),
        slot @ None => *slot = Some(g),
    }
}
