//! Gradient-based saliency: Gradients, Guided Backpropagation, Integrated
//! Gradients and the SmoothGrad wrapper (SGBP, SIG).
//!
//! Every method first produces a per-channel attribution `[C, H, W]` for a
//! scalar model output and then reduces it over channels to an `H x W` map.
//! Maps are stored unnormalized together with their raw extremes.
//!
//! The low-level entry points ([`input_gradients`],
//! [`integrated_gradients_raw`], [`attribute_maps`]) work on any [`Model`]
//! with a caller-supplied readout that appends the explained scalars to the
//! tape. Several scalars can share one forward pass; the detector entry point
//! [`explain`] uses this to explain all decisions of a detection at once.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use image::{ImageBuffer, Luma};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detector::{record_decision, ClassTarget, Decision, Detection, Detector};
use crate::error::{Error, Result};
use crate::metrics::minmax_normalize;
use crate::model::{Model, ParamGrads};
use crate::tape::{BackwardHookSet, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

/// One scalar of the detector output: a class logit (or score) or a decoded
/// box coordinate at a given anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplanationTarget {
    pub anchor_index: usize,
    pub class_id: usize,
    pub decision: Decision,
}

impl ExplanationTarget {
    pub fn from_detection(detection: &Detection, decision: Decision) -> Self {
        ExplanationTarget {
            anchor_index: detection.anchor_index,
            class_id: detection.class_id,
            decision,
        }
    }
}

impl fmt::Display for ExplanationTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "anchor {} class {} {}",
            self.anchor_index, self.class_id, self.decision
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gradients,
    Gbp,
    Ig,
    Sgbp,
    Sig,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Gradients,
        Method::Gbp,
        Method::Ig,
        Method::Sgbp,
        Method::Sig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gradients => "gradients",
            Method::Gbp => "gbp",
            Method::Ig => "ig",
            Method::Sgbp => "sgbp",
            Method::Sig => "sig",
        }
    }

    /// The unsmoothed method and whether SmoothGrad wraps it.
    pub fn split(self) -> (BaseMethod, bool) {
        match self {
            Method::Gradients => (BaseMethod::Gradients, false),
            Method::Gbp => (BaseMethod::GuidedBackprop, false),
            Method::Ig => (BaseMethod::IntegratedGradients, false),
            Method::Sgbp => (BaseMethod::GuidedBackprop, true),
            Method::Sig => (BaseMethod::IntegratedGradients, true),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown saliency method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMethod {
    Gradients,
    GuidedBackprop,
    IntegratedGradients,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    #[default]
    SumAbs,
    MaxAbs,
    MeanAbs,
}

impl FromStr for ChannelReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum_abs" => Ok(ChannelReduction::SumAbs),
            "max_abs" => Ok(ChannelReduction::MaxAbs),
            "mean_abs" => Ok(ChannelReduction::MeanAbs),
            _ => Err(Error::InvalidArgument(format!("unknown channel reduction {s:?}"))),
        }
    }
}

/// Integrated Gradients reference input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// All zeros (black image).
    #[default]
    Black,
    /// Every pixel and channel set to one value.
    Constant(f64),
}

impl Baseline {
    pub fn tensor(self, shape: &[usize]) -> Tensor {
        match self {
            Baseline::Black => Tensor::zeros(shape),
            Baseline::Constant(v) => Tensor::full(shape, v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub reduction: ChannelReduction,
    pub class_target: ClassTarget,
    pub ig_steps: usize,
    pub ig_baseline: Baseline,
    pub smooth_samples: usize,
    /// Noise standard deviation as a fraction of the input's dynamic range.
    pub smooth_sigma: f64,
    pub seed: u64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            reduction: ChannelReduction::SumAbs,
            class_target: ClassTarget::Logit,
            ig_steps: 32,
            ig_baseline: Baseline::Black,
            smooth_samples: 15,
            smooth_sigma: 0.15,
            seed: 0,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ig_steps == 0 {
            return Err(Error::InvalidConfig("ig_steps must be at least 1".into()));
        }
        if self.smooth_samples == 0 {
            return Err(Error::InvalidConfig("smooth_samples must be at least 1".into()));
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "smooth_sigma must be finite and non-negative, got {}",
                self.smooth_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// `[H, W]`, unnormalized.
    pub values: Tensor,
    pub raw_min: f64,
    pub raw_max: f64,
    pub target: ExplanationTarget,
    pub method: Method,
    pub model_fingerprint: String,
}

impl SaliencyMap {
    pub fn new(values: Tensor, target: ExplanationTarget, method: Method, model_fingerprint: String) -> Self {
        SaliencyMap {
            raw_min: values.min(),
            raw_max: values.max(),
            values,
            target,
            method,
            model_fingerprint,
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn raw_range(&self) -> f64 {
        self.raw_max - self.raw_min
    }
}

/// Appends the explained scalars to a tape holding the model output.
pub type Readout<'a> = dyn Fn(&mut Tape, Var) -> Result<Vec<Var>> + 'a;

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGradients {
    /// Value of each readout scalar.
    pub values: Vec<f64>,
    /// Input gradient of each scalar, shaped like the input.
    pub gradients: Vec<Tensor>,
}

/// Guided Backpropagation's relu rule: pass the upstream gradient only where
/// the forward input and the upstream gradient are both positive.
pub fn guided_relu_hooks() -> BackwardHookSet {
    BackwardHookSet::new().with_rule(
        UnaryKind::Relu,
        Arc::new(|input: &Tensor, _output: &Tensor, upstream: &Tensor| {
            input
                .zip_map(upstream, |x, g| if x > 0.0 && g > 0.0 { g } else { 0.0 })
                .expect("relu input and upstream share a shape")
        }),
    )
}

/// One forward pass, one backward pass per readout scalar.
pub fn input_gradients(
    model: &Model,
    input: &Tensor,
    readout: &Readout,
    hooks: &BackwardHookSet,
) -> Result<ScalarGradients> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), true);
    let (output, _) = model.record_on(&mut tape, x, ParamGrads::Skip)?;
    let scalars = readout(&mut tape, output)?;
    let mut values = Vec::with_capacity(scalars.len());
    let mut gradients = Vec::with_capacity(scalars.len());
    for s in scalars {
        let value = tape.value(s);
        if value.numel() != 1 {
            return Err(Error::shape("readout scalar", &[1], value.shape()));
        }
        let v = value.data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("explained scalar is {v}")));
        }
        let mut grads = tape.backward_with_hooks(s, Tensor::ones(value.shape()), hooks)?;
        let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(input.shape()));
        if !g.is_finite() {
            return Err(Error::NonFinite("input gradient".into()));
        }
        values.push(v);
        gradients.push(g);
    }
    Ok(ScalarGradients { values, gradients })
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgAttribution {
    /// Signed per-channel attribution of each scalar, shaped like the input.
    pub attributions: Vec<Tensor>,
    pub f_input: Vec<f64>,
    pub f_baseline: Vec<f64>,
}

impl IgAttribution {
    /// `|sum(A) - (F(x) - F(x'))| / |F(x) - F(x')|` for scalar `i`.
    pub fn completeness_residual(&self, i: usize) -> f64 {
        let delta = self.f_input[i] - self.f_baseline[i];
        (self.attributions[i].sum() - delta).abs() / delta.abs()
    }
}

/// `(x - x') * mean_{k=1..m} grad F(x' + (k/m)(x - x'))` per scalar.
pub fn integrated_gradients_raw(
    model: &Model,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
    readout: &Readout,
) -> Result<IgAttribution> {
    if steps == 0 {
        return Err(Error::InvalidArgument("integrated gradients needs at least 1 step".into()));
    }
    if baseline.shape() != input.shape() {
        return Err(Error::shape("integrated gradients baseline", input.shape(), baseline.shape()));
    }
    let hooks = BackwardHookSet::new();
    let diff = input.zip_map(baseline, |x, b| x - b)?;
    let mut sums: Option<Vec<Tensor>> = None;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let point = baseline.zip_map(&diff, |b, d| b + alpha * d)?;
        let g = input_gradients(model, &point, readout, &hooks)?;
        match &mut sums {
            None => sums = Some(g.gradients),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&g.gradients) {
                    a.add_assign(g)?;
                }
            }
        }
    }
    let attributions = sums
        .expect("steps >= 1")
        .iter()
        .map(|s| s.zip_map(&diff, |g, d| d * g / steps as f64))
        .collect::<Result<Vec<_>>>()?;
    let f_input = scalar_values(model, input, readout)?;
    let f_baseline = scalar_values(model, baseline, readout)?;
    Ok(IgAttribution {
        attributions,
        f_input,
        f_baseline,
    })
}

fn scalar_values(model: &Model, input: &Tensor, readout: &Readout) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let (output, _) = model.record_on(&mut tape, x, ParamGrads::Skip)?;
    readout(&mut tape, output)?
        .into_iter()
        .map(|s| {
            let v = tape.value(s).data()[0];
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("explained scalar is {v}")))
            }
        })
        .collect()
}

/// Reduces `[1, C, H, W]` or `[C, H, W]` to `[H, W]`.
pub fn reduce_channels(attribution: &Tensor, reduction: ChannelReduction) -> Result<Tensor> {
    let shape = attribution.shape();
    let (c, h, w) = match shape {
        [c, h, w] | [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::InvalidShape(format!("expected [C, H, W] attribution, got {shape:?}"))),
    };
    let plane = h * w;
    let data = attribution.data();
    let values = (0..plane)
        .map(|i| {
            let channel = (0..c).map(|ch| data[ch * plane + i].abs());
            match reduction {
                ChannelReduction::SumAbs => channel.sum(),
                ChannelReduction::MaxAbs => channel.fold(0.0, f64::max),
                ChannelReduction::MeanAbs => channel.sum::<f64>() / c as f64,
            }
        })
        .collect();
    Tensor::new(vec![h, w], values)
}

fn base_maps(
    model: &Model,
    input: &Tensor,
    readout: &Readout,
    method: BaseMethod,
    config: &SaliencyConfig,
) -> Result<Vec<Tensor>> {
    let raw = match method {
        BaseMethod::Gradients => input_gradients(model, input, readout, &BackwardHookSet::new())?.gradients,
        BaseMethod::GuidedBackprop => input_gradients(model, input, readout, &guided_relu_hooks())?.gradients,
        BaseMethod::IntegratedGradients => {
            let baseline = config.ig_baseline.tensor(input.shape());
            integrated_gradients_raw(model, input, &baseline, config.ig_steps, readout)?.attributions
        }
    };
    raw.iter().map(|a| reduce_channels(a, config.reduction)).collect()
}

/// Mean of base-method maps over `samples` Gaussian-perturbed inputs.
/// With `sigma == 0` the base method is evaluated once on the clean input.
pub fn smoothgrad_maps(
    model: &Model,
    input: &Tensor,
    readout: &Readout,
    method: BaseMethod,
    config: &SaliencyConfig,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    if config.smooth_sigma == 0.0 {
        return base_maps(model, input, readout, method, config);
    }
    let range = input.max() - input.min();
    let std = config.smooth_sigma * if range > 0.0 { range } else { 1.0 };
    let noise = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sums: Option<Vec<Tensor>> = None;
    for _ in 0..config.smooth_samples {
        let noisy = input.map(|v| v + noise.sample(&mut rng));
        let maps = base_maps(model, &noisy, readout, method, config)?;
        match &mut sums {
            None => sums = Some(maps),
            Some(acc) => {
                for (a, m) in acc.iter_mut().zip(&maps) {
                    a.add_assign(m)?;
                }
            }
        }
    }
    let n = config.smooth_samples as f64;
    Ok(sums
        .expect("samples >= 1")
        .into_iter()
        .map(|s| s.map(|v| v / n))
        .collect())
}

/// Channel-reduced maps of `method` for every readout scalar.
pub fn attribute_maps(
    model: &Model,
    input: &Tensor,
    readout: &Readout,
    method: Method,
    config: &SaliencyConfig,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    let (base, smoothed) = method.split();
    if smoothed {
        smoothgrad_maps(model, input, readout, base, config)
    } else {
        base_maps(model, input, readout, base, config)
    }
}

fn detector_readout<'a>(
    detector: &'a Detector,
    targets: &'a [ExplanationTarget],
    class_target: ClassTarget,
) -> impl Fn(&mut Tape, Var) -> Result<Vec<Var>> + 'a {
    move |tape: &mut Tape, output: Var| {
        targets
            .iter()
            .map(|t| {
                record_decision(
                    tape,
                    output,
                    &detector.config,
                    t.anchor_index,
                    t.class_id,
                    t.decision,
                    class_target,
                )
            })
            .collect()
    }
}

/// Explains several targets of one image with a shared forward pass per
/// evaluation point. `image` is `[C, H, W]` or `[1, C, H, W]`.
pub fn explain(
    detector: &Detector,
    image: &Tensor,
    targets: &[ExplanationTarget],
    method: Method,
    config: &SaliencyConfig,
) -> Result<Vec<SaliencyMap>> {
    let input = detector.as_batch(image)?;
    let readout = detector_readout(detector, targets, config.class_target);
    let maps = attribute_maps(&detector.model, &input, &readout, method, config)?;
    let fingerprint = detector.model.fingerprint();
    Ok(maps
        .into_iter()
        .zip(targets)
        .map(|(values, target)| SaliencyMap::new(values, *target, method, fingerprint.clone()))
        .collect())
}

fn explain_one(
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    method: Method,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    Ok(explain(detector, image, std::slice::from_ref(target), method, config)?
        .pop()
        .expect("one map per target"))
}

pub fn gradients(
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    explain_one(detector, image, target, Method::Gradients, config)
}

pub fn guided_backprop(
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    explain_one(detector, image, target, Method::Gbp, config)
}

pub fn integrated_gradients(
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    explain_one(detector, image, target, Method::Ig, config)
}

/// SmoothGrad around `base` (Gradients, GBP or IG).
pub fn smoothgrad(
    base: BaseMethod,
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    config: &SaliencyConfig,
) -> Result<SaliencyMap> {
    let input = detector.as_batch(image)?;
    let targets = [*target];
    let readout = detector_readout(detector, &targets, config.class_target);
    let values = smoothgrad_maps(&detector.model, &input, &readout, base, config)?
        .pop()
        .expect("one map");
    let method = match base {
        BaseMethod::GuidedBackprop => Method::Sgbp,
        BaseMethod::IntegratedGradients => Method::Sig,
        BaseMethod::Gradients => Method::Gradients,
    };
    Ok(SaliencyMap::new(values, *target, method, detector.model.fingerprint()))
}

/// Signed IG attribution of one detector target, for completeness checks.
pub fn integrated_gradients_signed(
    detector: &Detector,
    image: &Tensor,
    target: &ExplanationTarget,
    config: &SaliencyConfig,
) -> Result<IgAttribution> {
    let input = detector.as_batch(image)?;
    let targets = [*target];
    let readout = detector_readout(detector, &targets, config.class_target);
    let baseline = config.ig_baseline.tensor(input.shape());
    integrated_gradients_raw(&detector.model, &input, &baseline, config.ig_steps, &readout)
}

#[derive(Serialize)]
struct Sidecar<'a> {
    raw_min: f64,
    raw_max: f64,
    method: Method,
    target: &'a ExplanationTarget,
    model_fingerprint: &'a str,
    height: usize,
    width: usize,
    config: &'a SaliencyConfig,
}

/// Writes the min-max normalized map as a 16-bit grayscale PNG and a JSON
/// sidecar (same stem, `.json`) with the raw extremes, target, method, model
/// fingerprint and config.
pub fn export_map(map: &SaliencyMap, config: &SaliencyConfig, png_path: &Path) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let norm = minmax_normalize(map.values.data());
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(norm[y as usize * w + x as usize] * 65535.0).round() as u16])
    });
    buf.save(png_path).map_err(|source| Error::Image {
        path: png_path.into(),
        source,
    })?;
    let sidecar = Sidecar {
        raw_min: map.raw_min,
        raw_max: map.raw_max,
        method: map.method,
        target: &map.target,
        model_fingerprint: &map.model_fingerprint,
        height: h,
        width: w,
        config,
    };
    let path = png_path.with_extension("json");
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
}

/// Reads a 16-bit map written by [`export_map`] back as normalized values.
pub fn read_map_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(
        vec![h, w],
        img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
    )
}
