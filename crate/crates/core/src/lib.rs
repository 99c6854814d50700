//! Sanity checks for gradient-based saliency explanations of object
//! detectors.
//!
//! The crate bundles everything the checks need at desk scale:
//!
//! - [`tensor`], [`ops`], [`tape`], [`model`]: a small reverse-mode autodiff
//!   engine with overridable activation backward rules;
//! - [`detector`]: a single-shot anchor detector with training, decoding,
//!   NMS and mAP@0.5;
//! - [`synthdata`]: a seeded synthetic-shapes dataset and the label/box
//!   randomization transform;
//! - [`saliency`]: Gradients, Guided Backpropagation, Integrated Gradients
//!   and SmoothGrad;
//! - [`sanity`]: cascading model-parameter randomization and data
//!   randomization runners;
//! - [`metrics`]: SSIM, the six automated qualitative criteria and the
//!   sensitivity score.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod metrics;
pub mod ops;
pub mod saliency;
pub mod sanity;
pub mod model;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ActivationFn, Layer, LayerSlot, Model, ParamGrads, Recorded};
pub use tape::{BackwardHookSet, Tape, UnaryKind, Var};
pub use tensor::Tensor;
