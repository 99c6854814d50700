//! Sequential models built from parameterized layers.
//!
//! A [`Model`] is a backbone (`body`) followed by zero or more parallel
//! `heads` whose NCHW outputs are concatenated along the channel axis. With
//! no heads the backbone output is the model output. Parameterized layers
//! are addressed in input-to-output order (body first, then heads), which is
//! the order cascading randomization walks in reverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{BackwardHookSet, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// Distribution a parameterized layer is (re-)initialized from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInit {
    pub weight_std: f64,
    pub bias_mean: f64,
    pub bias_std: f64,
}

impl ParamInit {
    /// He-normal weights for `fan_in` inputs and near-zero biases.
    pub fn he(fan_in: usize) -> Self {
        ParamInit {
            weight_std: (2.0 / fan_in as f64).sqrt(),
            bias_mean: 0.0,
            bias_std: 0.01,
        }
    }

    pub fn with_bias_mean(mut self, mean: f64) -> Self {
        self.bias_mean = mean;
        self
    }

    fn sample(&self, rng: &mut ChaCha8Rng, weight: &mut Tensor, bias: &mut Tensor) {
        let w = Normal::new(0.0, self.weight_std).expect("finite std");
        for v in weight.data_mut() {
            *v = w.sample(rng);
        }
        let b = Normal::new(self.bias_mean, self.bias_std).expect("finite std");
        for v in bias.data_mut() {
            *v = b.sample(rng);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub name: String,
    /// `[out, in, k, k]`
    pub kernel: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub init: ParamInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub init: ParamInit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationFn {
    Relu,
    Silu,
    Sigmoid,
}

impl ActivationFn {
    pub fn unary_kind(self) -> UnaryKind {
        match self {
            ActivationFn::Relu => UnaryKind::Relu,
            ActivationFn::Silu => UnaryKind::Silu,
            ActivationFn::Sigmoid => UnaryKind::Sigmoid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    Dense(Dense),
    Activation(ActivationFn),
    MaxPool { window: usize, stride: usize },
    /// `[N, ...] -> [N, prod(...)]`
    Flatten,
}

impl Layer {
    pub fn conv2d(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Layer {
        Layer::Conv2d(Conv2d {
            name: name.to_string(),
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: Tensor::zeros(&[out_channels]),
            stride,
            padding,
            init: ParamInit::he(in_channels * kernel * kernel),
        })
    }

    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Layer {
        Layer::Dense(Dense {
            name: name.to_string(),
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
            init: ParamInit::he(inputs),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Layer::Conv2d(c) => c.name.clone(),
            Layer::Dense(d) => d.name.clone(),
            Layer::Activation(a) => format!("{a:?}").to_lowercase(),
            Layer::MaxPool { .. } => "max_pool".into(),
            Layer::Flatten => "flatten".into(),
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Conv2d(_) | Layer::Dense(_))
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Parameter tensors in storage order (weight, then bias).
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Draws fresh parameters from the layer's init distribution.
    pub fn reinitialize(&mut self, seed: u64, stream: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        match self {
            Layer::Conv2d(c) => c.init.sample(&mut rng, &mut c.kernel, &mut c.bias),
            Layer::Dense(d) => d.init.sample(&mut rng, &mut d.weight, &mut d.bias),
            _ => {}
        }
    }

    fn record(&self, tape: &mut Tape, x: Var, track_params: bool) -> Result<(Var, Vec<Var>)> {
        match self {
            Layer::Conv2d(c) => {
                let k = tape.leaf(c.kernel.clone(), track_params);
                let b = tape.leaf(c.bias.clone(), track_params);
                let y = tape.conv2d(x, k, Some(b), c.stride, c.padding)?;
                Ok((y, vec![k, b]))
            }
            Layer::Dense(d) => {
                let w = tape.leaf(d.weight.clone(), track_params);
                let b = tape.leaf(d.bias.clone(), track_params);
                Ok((tape.dense(x, w, Some(b))?, vec![w, b]))
            }
            Layer::Activation(a) => Ok((tape.unary(a.unary_kind(), x), Vec::new())),
            Layer::MaxPool { window, stride } => Ok((tape.max_pool(x, *window, *stride)?, Vec::new())),
            Layer::Flatten => {
                let shape = tape.value(x).shape();
                let flat = [shape[0], shape[1..].iter().product()];
                Ok((tape.reshape(x, &flat)?, Vec::new()))
            }
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(c) => ops::conv2d_forward(x, &c.kernel, Some(&c.bias), c.stride, c.padding),
            Layer::Dense(d) => ops::dense_forward(x, &d.weight, Some(&d.bias)),
            Layer::Activation(a) => {
                let kind = a.unary_kind();
                Ok(x.map(|v| kind.apply(v)))
            }
            Layer::MaxPool { window, stride } => Ok(ops::max_pool_forward(x, *window, *stride)?.0),
            Layer::Flatten => {
                let shape = x.shape();
                x.reshape(&[shape[0], shape[1..].iter().product()])
            }
        }
    }
}

/// Position of a parameterized layer within a [`Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerSlot {
    Body(usize),
    Head(usize),
}

/// Whether a recorded forward pass tracks parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGrads {
    Track,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    /// Per-sample input shape (the batch axis is excluded).
    pub input_shape: Vec<usize>,
    pub body: Vec<Layer>,
    pub heads: Vec<Layer>,
}

/// A forward pass captured on a tape.
#[derive(Debug)]
pub struct Recorded {
    pub tape: Tape,
    pub input: Var,
    pub output: Var,
    /// Parameter leaves in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl Recorded {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Gradient of `seed · output` with respect to the model input.
    pub fn input_gradient(&self, seed: Tensor, hooks: &BackwardHookSet) -> Result<Tensor> {
        let mut grads = self.tape.backward_with_hooks(self.output, seed, hooks)?;
        Ok(grads
            .take(self.input)
            .unwrap_or_else(|| Tensor::zeros(self.tape.value(self.input).shape())))
    }
}

impl Model {
    pub fn new(input_shape: Vec<usize>, body: Vec<Layer>, heads: Vec<Layer>) -> Self {
        Model {
            input_shape,
            body,
            heads,
        }
    }

    /// Model without layers: the output is the input.
    pub fn identity(input_shape: Vec<usize>) -> Self {
        Self::new(input_shape, Vec::new(), Vec::new())
    }

    /// Deterministically initializes every parameterized layer from `seed`;
    /// layer `i` (in [`Self::param_layers`] order) draws from stream `i`.
    pub fn initialize(&mut self, seed: u64) {
        for (stream, slot) in self.param_layers().into_iter().enumerate() {
            self.layer_mut(slot).reinitialize(seed, stream as u64);
        }
    }

    pub fn layer(&self, slot: LayerSlot) -> &Layer {
        match slot {
            LayerSlot::Body(i) => &self.body[i],
            LayerSlot::Head(i) => &self.heads[i],
        }
    }

    pub fn layer_mut(&mut self, slot: LayerSlot) -> &mut Layer {
        match slot {
            LayerSlot::Body(i) => &mut self.body[i],
            LayerSlot::Head(i) => &mut self.heads[i],
        }
    }

    /// Parameterized layers from input to output.
    pub fn param_layers(&self) -> Vec<LayerSlot> {
        let body = self
            .body
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| LayerSlot::Body(i));
        let heads = self
            .heads
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| LayerSlot::Head(i));
        body.chain(heads).collect()
    }

    pub fn param_count(&self) -> usize {
        self.body.iter().chain(&self.heads).map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.body.iter().chain(&self.heads).flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.body
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn count_activation(&self, activation: ActivationFn) -> usize {
        self.body
            .iter()
            .chain(&self.heads)
            .filter(|l| matches!(l, Layer::Activation(a) if *a == activation))
            .count()
    }

    /// SHA-256 over parameter shapes and bit patterns, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for &extent in p.shape() {
                hasher.update((extent as u64).to_le_bytes());
            }
            for v in p.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend(&self.input_shape);
            return Err(Error::shape("model input", &expected, shape));
        }
        Ok(())
    }

    fn describe(slot: LayerSlot, layer: &Layer) -> String {
        match slot {
            LayerSlot::Body(i) => format!("body layer {i} ({})", layer.name()),
            LayerSlot::Head(i) => format!("head {i} ({})", layer.name()),
        }
    }

    /// Plain evaluation without recording.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.body.iter().enumerate() {
            x = layer
                .forward(&x)
                .map_err(|e| in_layer(e, Self::describe(LayerSlot::Body(i), layer)))?;
        }
        if self.heads.is_empty() {
            return Ok(x);
        }
        let outs = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| {
                h.forward(&x)
                    .map_err(|e| in_layer(e, Self::describe(LayerSlot::Head(i), h)))
            })
            .collect::<Result<Vec<_>>>()?;
        ops::concat_channels(&outs.iter().collect::<Vec<_>>())
    }

    /// Evaluation that records every primitive on a fresh tape.
    pub fn record(&self, input: &Tensor, param_grads: ParamGrads) -> Result<Recorded> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        self.record_on(&mut tape, x, param_grads)
            .map(|(output, params)| Recorded {
                tape,
                input: x,
                output,
                params,
            })
    }

    /// Records the model on an existing tape, starting from `input`.
    pub fn record_on(
        &self,
        tape: &mut Tape,
        input: Var,
        param_grads: ParamGrads,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(input))?;
        let track = param_grads == ParamGrads::Track;
        let mut params = Vec::new();
        let mut x = input;
        for (i, layer) in self.body.iter().enumerate() {
            let (y, p) = layer
                .record(tape, x, track)
                .map_err(|e| in_layer(e, Self::describe(LayerSlot::Body(i), layer)))?;
            x = y;
            params.extend(p);
        }
        if self.heads.is_empty() {
            return Ok((x, params));
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for (i, head) in self.heads.iter().enumerate() {
            let (y, p) = head
                .record(tape, x, track)
                .map_err(|e| in_layer(e, Self::describe(LayerSlot::Head(i), head)))?;
            outs.push(y);
            params.extend(p);
        }
        Ok((tape.concat_channels(&outs)?, params))
    }
}

fn in_layer(err: Error, layer: String) -> Error {
    match err {
        Error::ShapeMismatch {
            context,
            expected,
            actual,
        } => Error::ShapeMismatch {
            context: format!("{layer}: {context}"),
            expected,
            actual,
        },
        Error::InvalidShape(m) => Error::InvalidShape(format!("{layer}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{layer}: {m}")),
        other => other,
    }
}
