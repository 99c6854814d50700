use serde::{Deserialize, Serialize};

use super::boxes::{nms, BBox};
use super::{decode_box, encode_box, DetectorConfig};
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::tensor::Tensor;

/// One decoded detector output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Clipped to the image; for reporting.
    pub bbox: BBox,
    /// Unclipped decoded box; the value differentiated by box decisions.
    pub raw_bbox: BBox,
    pub class_id: usize,
    /// Sigmoid confidence of `class_id` at `anchor_index`.
    pub score: f64,
    pub logit: f64,
    pub anchor_index: usize,
    /// Flat raw-output offset of the class logit.
    pub logit_index: usize,
    /// Flat raw-output offsets of `(tx, ty, tw, th)`.
    pub offset_indices: [usize; 4],
}

/// Decodes raw detector outputs: best class per anchor, score threshold,
/// clipping, then per-class NMS. Detections come back sorted by descending
/// score; an empty result is not an error.
pub fn decode(
    raw: &Tensor,
    config: &DetectorConfig,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Detection>> {
    let expected = config.output_shape();
    if raw.shape() != expected {
        return Err(Error::shape("raw detector output", &expected, raw.shape()));
    }
    let size = config.input_size as f64;
    let mut candidates = Vec::new();
    for anchor_index in 0..config.anchor_count() {
        let (class_id, logit) = (0..config.classes)
            .map(|c| (c, raw.data()[config.logit_index(anchor_index, c)]))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let score = sigmoid(logit);
        if !(score >= score_threshold) {
            continue;
        }
        let offset_indices = config.offset_indices(anchor_index);
        let raw_bbox = decode_box(&config.anchor(anchor_index), offset_indices.map(|i| raw.data()[i]));
        let bbox = raw_bbox.clipped(size, size);
        if !bbox.is_valid_in(size, size) {
            continue;
        }
        candidates.push(Detection {
            bbox,
            raw_bbox,
            class_id,
            score,
            logit,
            anchor_index,
            logit_index: config.logit_index(anchor_index, class_id),
            offset_indices,
        });
    }
    let triples: Vec<_> = candidates
        .iter()
        .map(|d| (d.bbox, d.class_id, d.score))
        .collect();
    Ok(nms(&triples, nms_iou)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect())
}

/// Inverse of [`decode`] for a detection set: a raw output in which exactly
/// the given anchors carry their class logit and box, and every other logit
/// is strongly negative.
pub fn encode_detections(detections: &[Detection], config: &DetectorConfig) -> Tensor {
    let mut raw = Tensor::full(&config.output_shape(), -30.0);
    for a in 0..config.anchor_count() {
        for i in config.offset_indices(a) {
            raw.data_mut()[i] = 0.0;
        }
    }
    for d in detections {
        raw.data_mut()[config.logit_index(d.anchor_index, d.class_id)] = d.logit;
        let offsets = encode_box(&config.anchor(d.anchor_index), &d.raw_bbox);
        for (i, v) in config.offset_indices(d.anchor_index).into_iter().zip(offsets) {
            raw.data_mut()[i] = v;
        }
    }
    raw
}
