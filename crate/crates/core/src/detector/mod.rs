//! A tiny single-shot anchor detector.
//!
//! Four 3x3 conv blocks (stride 2 until the anchor grid resolution is
//! reached, stride 1 afterwards) feed two parallel 1x1 conv heads: per-class
//! logits and four box offsets. The model output is `[1, classes + 4, G, G]`
//! with one anchor of fixed side per grid cell; anchor `a` sits at cell
//! `(a / G, a % G)`.
//!
//! Offsets `(tx, ty, tw, th)` decode as
//! `cx = ax + tx * s`, `cy = ay + ty * s`, `w = s * exp(tw)`, `h = s * exp(th)`
//! for an anchor of side `s` centered at `(ax, ay)`.

mod boxes;
mod checkpoint;
mod decode;
mod eval;
mod train;

use serde::{Deserialize, Serialize};

pub use boxes::{iou, nms, Annotation, BBox, Coord};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decode::{decode, encode_detections, Detection};
pub use eval::{average_precision, map50, Prediction, MATCH_IOU};
pub use train::{dataset_map, match_anchors, train, AnchorMatch, TrainOptions, TrainOutcome};

use crate::error::{Error, Result};
use crate::model::{ActivationFn, Layer, Model, ParamInit};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backbone nonlinearity; uniform across every conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// SiLU; the model then contains no ReLU at all.
    Smooth,
}

impl ActivationKind {
    pub fn function(self) -> ActivationFn {
        match self {
            ActivationKind::Relu => ActivationFn::Relu,
            ActivationKind::Smooth => ActivationFn::Silu,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(ActivationKind::Relu),
            "smooth" | "silu" => Ok(ActivationKind::Smooth),
            other => Err(Error::InvalidConfig(format!(
                "unknown activation {other:?} (expected relu or smooth)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub input_channels: usize,
    pub classes: usize,
    /// Anchor cells per side.
    pub grid: usize,
    /// Anchor side in pixels (a single scale per cell).
    pub anchor_size: f64,
    /// Output channels of the four conv blocks.
    pub widths: [usize; 4],
    pub activation: ActivationKind,
    /// Initial bias of the class head, a prior against foreground.
    pub class_bias_prior: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 64,
            input_channels: 3,
            classes: 3,
            grid: 8,
            anchor_size: 16.0,
            widths: [8, 16, 32, 32],
            activation: ActivationKind::Relu,
            class_bias_prior: -2.0,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.classes == 0 || self.input_channels == 0 {
            return bad("classes and input_channels must be positive".into());
        }
        if self.widths.contains(&0) {
            return bad("conv widths must be positive".into());
        }
        if self.grid == 0 || self.input_size % self.grid != 0 {
            return bad(format!(
                "grid {} must divide input size {}",
                self.grid, self.input_size
            ));
        }
        let factor = self.input_size / self.grid;
        if !factor.is_power_of_two() || factor > 16 {
            return bad(format!(
                "input/grid ratio {factor} must be a power of two no larger than 16"
            ));
        }
        if !(self.anchor_size.is_finite() && self.anchor_size > 0.0) {
            return bad("anchor size must be positive".into());
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.input_size as f64 / self.grid as f64
    }

    pub fn anchor_count(&self) -> usize {
        self.grid * self.grid
    }

    /// Channels of the raw output: class logits then four offsets.
    pub fn output_channels(&self) -> usize {
        self.classes + 4
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [1, self.output_channels(), self.grid, self.grid]
    }

    pub fn anchor(&self, anchor_index: usize) -> BBox {
        let (gy, gx) = (anchor_index / self.grid, anchor_index % self.grid);
        let cell = self.cell_size();
        BBox::from_center(
            (gx as f64 + 0.5) * cell,
            (gy as f64 + 0.5) * cell,
            self.anchor_size,
            self.anchor_size,
        )
    }

    pub fn anchors(&self) -> Vec<BBox> {
        (0..self.anchor_count()).map(|a| self.anchor(a)).collect()
    }

    /// Flat output offset of the logit of `class_id` at `anchor_index`.
    pub fn logit_index(&self, anchor_index: usize, class_id: usize) -> usize {
        class_id * self.anchor_count() + anchor_index
    }

    /// Flat output offsets of `(tx, ty, tw, th)` at `anchor_index`.
    pub fn offset_indices(&self, anchor_index: usize) -> [usize; 4] {
        let base = self.classes * self.anchor_count() + anchor_index;
        [0, 1, 2, 3].map(|k| base + k * self.anchor_count())
    }

    /// Strides of the four conv blocks.
    pub fn block_strides(&self) -> [usize; 4] {
        let halvings = (self.input_size / self.grid).trailing_zeros() as usize;
        std::array::from_fn(|i| if i < halvings { 2 } else { 1 })
    }

    /// Closed-form parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut prev = self.input_channels;
        for &w in &self.widths {
            total += w * prev * 9 + w;
            prev = w;
        }
        total + (self.classes * prev + self.classes) + (4 * prev + 4)
    }
}

/// Encodes `target` relative to `anchor` as `(tx, ty, tw, th)`.
pub fn encode_box(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (cx, cy) = target.center();
    [
        (cx - acx) / aw,
        (cy - acy) / ah,
        (target.width() / aw).ln(),
        (target.height() / ah).ln(),
    ]
}

pub fn decode_box(anchor: &BBox, offsets: [f64; 4]) -> BBox {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BBox::from_center(
        acx + offsets[0] * aw,
        acy + offsets[1] * ah,
        aw * offsets[2].exp(),
        ah * offsets[3].exp(),
    )
}

/// A detector decision that reduces to one scalar output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Class,
    XMin,
    YMin,
    XMax,
    YMax,
}

impl Decision {
    pub const ALL: [Decision; 5] = [
        Decision::Class,
        Decision::XMin,
        Decision::YMin,
        Decision::XMax,
        Decision::YMax,
    ];

    pub fn coord(self) -> Option<Coord> {
        match self {
            Decision::Class => None,
            Decision::XMin => Some(Coord::XMin),
            Decision::YMin => Some(Coord::YMin),
            Decision::XMax => Some(Coord::XMax),
            Decision::YMax => Some(Coord::YMax),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Decision::Class => "class",
            Decision::XMin => "x_min",
            Decision::YMin => "y_min",
            Decision::XMax => "x_max",
            Decision::YMax => "y_max",
        }
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Decision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Decision::ALL
            .into_iter()
            .find(|d| d.name() == s || format!("{d:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown decision {s:?}")))
    }
}

/// Which class tensor a `Class` decision differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassTarget {
    /// Pre-activation logit.
    #[default]
    Logit,
    /// Post-sigmoid confidence.
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    pub model: Model,
}

impl Detector {
    /// Builds the architecture and initializes it from `config.seed`.
    pub fn build(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let act = Layer::Activation(config.activation.function());
        let mut body = Vec::new();
        let mut prev = config.input_channels;
        for (i, (&w, stride)) in config.widths.iter().zip(config.block_strides()).enumerate() {
            body.push(Layer::conv2d(&format!("conv{}", i + 1), prev, w, 3, stride, 1));
            body.push(act.clone());
            prev = w;
        }
        let mut class_head = Layer::conv2d("class_head", prev, config.classes, 1, 1, 0);
        if let Layer::Conv2d(c) = &mut class_head {
            c.init = ParamInit::he(prev).with_bias_mean(config.class_bias_prior);
        }
        let box_head = Layer::conv2d("box_head", prev, 4, 1, 1, 0);
        let mut model = Model::new(
            vec![config.input_channels, config.input_size, config.input_size],
            body,
            vec![class_head, box_head],
        );
        model.initialize(config.seed);
        Ok(Detector { config, model })
    }

    pub fn raw_outputs(&self, image: &Tensor) -> Result<Tensor> {
        self.model.forward(&self.as_batch(image)?)
    }

    pub fn detect(&self, image: &Tensor, score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        decode(&self.raw_outputs(image)?, &self.config, score_threshold, nms_iou)
    }

    /// Accepts `[C, H, W]` or `[1, C, H, W]`.
    pub fn as_batch(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.input_channels, c.input_size, c.input_size];
        match image.shape() {
            s if s == expected => image.reshape(&[1, expected[0], expected[1], expected[2]]),
            s if s.len() == 4 && s[0] == 1 && s[1..] == expected => Ok(image.clone()),
            s => Err(Error::shape("detector input", &expected, s)),
        }
    }
}

/// Appends the scalar for `decision` at `(anchor_index, class_id)` to a tape
/// holding the raw detector output `output`.
///
/// Box coordinates are decoded without clipping so that gradients survive at
/// image borders.
pub fn record_decision(
    tape: &mut Tape,
    output: Var,
    config: &DetectorConfig,
    anchor_index: usize,
    class_id: usize,
    decision: Decision,
    class_target: ClassTarget,
) -> Result<Var> {
    if anchor_index >= config.anchor_count() || class_id >= config.classes {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor_index} / class {class_id} outside the detector's {} anchors and {} classes",
            config.anchor_count(),
            config.classes
        )));
    }
    let Some(coord) = decision.coord() else {
        let logit = tape.gather(output, &[config.logit_index(anchor_index, class_id)])?;
        return Ok(match class_target {
            ClassTarget::Logit => logit,
            ClassTarget::Score => tape.sigmoid(logit),
        });
    };
    let anchor = config.anchor(anchor_index);
    let (acx, acy) = anchor.center();
    let [tx, ty, tw, th] = config.offset_indices(anchor_index);
    // coord = center + sign * size/2, center = a + t * s, size = s * exp(t')
    let (center_at, size_at, anchor_center, side, sign) = match coord {
        Coord::XMin => (tx, tw, acx, anchor.width(), -0.5),
        Coord::XMax => (tx, tw, acx, anchor.width(), 0.5),
        Coord::YMin => (ty, th, acy, anchor.height(), -0.5),
        Coord::YMax => (ty, th, acy, anchor.height(), 0.5),
    };
    let t_center = tape.gather(output, &[center_at])?;
    let center = tape.affine(t_center, side, anchor_center);
    let t_size = tape.gather(output, &[size_at])?;
    let scale = tape.exp(t_size);
    let half = tape.affine(scale, sign * side, 0.0);
    tape.add(center, half)
}
