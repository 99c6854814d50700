//! SGD training of the detector.
//!
//! Anchors are matched to ground truth by IoU: `>= positive_iou` is a
//! positive for the best-overlapping object, `< negative_iou` a negative, the
//! rest are ignored. Each object's best anchor is additionally forced
//! positive so that small or off-center objects still receive a target.
//!
//! Per image the loss is binary cross-entropy on the class logits of every
//! positive and negative anchor plus L1 on the box offsets of positives,
//! divided by the number of positives. Updates are plain SGD with a fixed
//! learning rate, one image at a time, in a seeded shuffled order.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{iou, Annotation};
use super::eval::{map50, Prediction};
use super::{encode_box, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::model::ParamGrads;
use crate::ops::sigmoid;
use crate::synthdata::SyntheticScene;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorMatch {
    /// Index into the image's annotations.
    Positive(usize),
    Negative,
    Ignore,
}

pub fn match_anchors(
    config: &DetectorConfig,
    annotations: &[Annotation],
    positive_iou: f64,
    negative_iou: f64,
) -> Vec<AnchorMatch> {
    let anchors = config.anchors();
    let mut matches: Vec<AnchorMatch> = anchors
        .iter()
        .map(|anchor| {
            let best = annotations
                .iter()
                .enumerate()
                .map(|(j, a)| (j, iou(anchor, &a.bbox)))
                .fold(None::<(usize, f64)>, |best, cur| match best {
                    Some(b) if b.1 >= cur.1 => Some(b),
                    _ => Some(cur),
                });
            match best {
                Some((j, overlap)) if overlap >= positive_iou => AnchorMatch::Positive(j),
                Some((_, overlap)) if overlap >= negative_iou => AnchorMatch::Ignore,
                _ => AnchorMatch::Negative,
            }
        })
        .collect();
    for (j, a) in annotations.iter().enumerate() {
        let best_anchor = anchors
            .iter()
            .enumerate()
            .map(|(i, anchor)| (i, iou(anchor, &a.bbox)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if best_anchor.1 > 0.0 {
            matches[best_anchor.0] = AnchorMatch::Positive(j);
        }
    }
    matches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Epoch budget.
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed of the shuffling order.
    pub seed: u64,
    /// Stop as soon as train mAP@0.5 reaches this value.
    pub target_map: Option<f64>,
    /// Epochs between train-mAP evaluations when `target_map` is set.
    pub eval_every: usize,
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Rescale each step's gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 60,
            learning_rate: 0.02,
            seed: 0,
            target_map: None,
            eval_every: 5,
            positive_iou: 0.5,
            negative_iou: 0.4,
            score_threshold: 0.3,
            nms_iou: 0.45,
            clip_norm: Some(20.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub detector: Detector,
    /// Mean per-image loss of each epoch.
    pub loss_trace: Vec<f64>,
    pub epochs_run: usize,
    /// Train-set mAP@0.5 of the returned detector.
    pub train_map: f64,
    /// Whether `target_map` was reached (false when no target was set).
    pub reached_target: bool,
}

/// Per-image loss and its gradient with respect to the raw output.
pub(crate) fn loss_and_gradient(
    config: &DetectorConfig,
    raw: &Tensor,
    annotations: &[Annotation],
    matches: &[AnchorMatch],
) -> (f64, Tensor) {
    let mut grad = Tensor::zeros(raw.shape());
    let positives = matches
        .iter()
        .filter(|m| matches!(m, AnchorMatch::Positive(_)))
        .count();
    let norm = positives.max(1) as f64;
    let mut loss = 0.0;
    for (anchor_index, m) in matches.iter().enumerate() {
        let target_class = match m {
            AnchorMatch::Ignore => continue,
            AnchorMatch::Negative => None,
            AnchorMatch::Positive(j) => Some(annotations[*j].class_id),
        };
        for c in 0..config.classes {
            let idx = config.logit_index(anchor_index, c);
            let z = raw.data()[idx];
            let y = if target_class == Some(c) { 1.0 } else { 0.0 };
            // Numerically stable BCE with logits.
            loss += (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()) / norm;
            grad.data_mut()[idx] = (sigmoid(z) - y) / norm;
        }
        if let AnchorMatch::Positive(j) = m {
            let target = encode_box(&config.anchor(anchor_index), &annotations[*j].bbox);
            for (k, idx) in config.offset_indices(anchor_index).into_iter().enumerate() {
                let d = raw.data()[idx] - target[k];
                loss += d.abs() / norm;
                grad.data_mut()[idx] = if d > 0.0 {
                    1.0 / norm
                } else if d < 0.0 {
                    -1.0 / norm
                } else {
                    0.0
                };
            }
        }
    }
    (loss, grad)
}

/// Train-set mAP@0.5 against the scenes' own annotations.
pub fn dataset_map(
    detector: &Detector,
    dataset: &[SyntheticScene],
    score_threshold: f64,
    nms_iou: f64,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(dataset.len());
    for scene in dataset {
        let dets = detector.detect(&scene.image, score_threshold, nms_iou)?;
        predictions.push(dets.iter().map(Prediction::from).collect());
    }
    let gt: Vec<Vec<Annotation>> = dataset.iter().map(|s| s.annotations.clone()).collect();
    map50(&predictions, &gt)
}

pub fn train(mut detector: Detector, dataset: &[SyntheticScene], opts: &TrainOptions) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    if !(opts.learning_rate >= 0.0 && opts.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate must be finite and non-negative, got {}",
            opts.learning_rate
        )));
    }
    let config = detector.config.clone();
    let prepared: Vec<(Tensor, Vec<AnchorMatch>)> = dataset
        .iter()
        .map(|scene| {
            Ok((
                detector.as_batch(&scene.image)?,
                match_anchors(&config, &scene.annotations, opts.positive_iou, opts.negative_iou),
            ))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(opts.epochs);
    let mut reached_target = false;
    let mut last_map = None;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &order {
            let (input, matches) = &prepared[i];
            let rec = detector.model.record(input, ParamGrads::Track)?;
            let (loss, seed) =
                loss_and_gradient(&config, rec.output_value(), &dataset[i].annotations, matches);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss,
                    trace: loss_trace,
                });
            }
            epoch_loss += loss;
            let mut grads = rec.tape.backward(rec.output, seed)?;
            let param_grads: Vec<Tensor> = rec
                .params
                .iter()
                .map(|v| grads.take(*v).expect("parameters are tracked"))
                .collect();
            let norm = param_grads
                .iter()
                .flat_map(|g| g.data())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            let step = match opts.clip_norm {
                Some(max) if norm > max => opts.learning_rate * max / norm,
                _ => opts.learning_rate,
            };
            for (param, g) in detector.model.params_mut().into_iter().zip(&param_grads) {
                for (p, g) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= step * g;
                }
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: mean,
                trace: loss_trace,
            });
        }
        loss_trace.push(mean);
        debug!("epoch {epoch}: loss {mean:.5}");

        if let Some(target) = opts.target_map {
            let every = opts.eval_every.max(1);
            if (epoch + 1) % every == 0 || epoch + 1 == opts.epochs {
                let m = dataset_map(&detector, dataset, opts.score_threshold, opts.nms_iou)?;
                debug!("epoch {epoch}: train mAP@0.5 {m:.4}");
                last_map = Some(m);
                if m >= target {
                    reached_target = true;
                    break;
                }
            }
        }
    }
    let epochs_run = loss_trace.len();
    let train_map = match last_map {
        Some(m) => m,
        None => dataset_map(&detector, dataset, opts.score_threshold, opts.nms_iou)?,
    };
    Ok(TrainOutcome {
        detector,
        loss_trace,
        epochs_run,
        train_map,
        reached_target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;

    #[test]
    fn matching_thresholds_and_forced_best_anchor() {
        let cfg = DetectorConfig::default();
        // Exactly anchor 0's box.
        let exact = Annotation {
            bbox: cfg.anchor(0),
            class_id: 1,
        };
        let m = match_anchors(&cfg, &[exact], 0.5, 0.4);
        assert_eq!(m[0], AnchorMatch::Positive(0));
        assert!(m[1..].iter().all(|x| *x != AnchorMatch::Positive(0)));

        // Small box between anchors: no anchor reaches 0.5 but the best one
        // is forced positive.
        let small = Annotation {
            bbox: BBox::new(30.0, 30.0, 38.0, 38.0),
            class_id: 0,
        };
        let m = match_anchors(&cfg, &[small], 0.5, 0.4);
        assert_eq!(m.iter().filter(|x| **x == AnchorMatch::Positive(0)).count(), 1);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = DetectorConfig::default();
        let anns = [
            Annotation {
                bbox: BBox::new(10.0, 12.0, 25.0, 27.0),
                class_id: 2,
            },
            Annotation {
                bbox: BBox::new(40.0, 35.0, 55.0, 52.0),
                class_id: 0,
            },
        ];
        let matches = match_anchors(&cfg, &anns, 0.5, 0.4);
        let raw = Tensor::new(
            cfg.output_shape().to_vec(),
            (0..cfg.output_channels() * cfg.anchor_count())
                .map(|i| ((i * 31) % 17) as f64 * 0.1 - 0.83)
                .collect(),
        )
        .unwrap();
        let (_, grad) = loss_and_gradient(&cfg, &raw, &anns, &matches);
        let h = 1e-6;
        for idx in (0..raw.numel()).step_by(7) {
            let mut plus = raw.clone();
            plus.data_mut()[idx] += h;
            let mut minus = raw.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_and_gradient(&cfg, &plus, &anns, &matches).0
                - loss_and_gradient(&cfg, &minus, &anns, &matches).0)
                / (2.0 * h);
            assert!((fd - grad.data()[idx]).abs() < 1e-6, "index {idx}: {fd} vs {}", grad.data()[idx]);
        }
    }
}
