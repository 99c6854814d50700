//! mAP@0.5.
//!
//! Per class, predictions from all images are ranked by descending score
//! (ties keep image order, then input order). Each prediction is matched to
//! the unmatched same-class ground-truth box of highest IoU in its image;
//! IoU >= 0.5 makes it a true positive. AP is the area under the
//! all-point-interpolated precision/recall curve, and mAP averages AP over
//! the classes that occur in the ground truth.

use serde::{Deserialize, Serialize};

use super::boxes::{iou, Annotation, BBox};
use super::decode::Detection;
use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl From<&Detection> for Prediction {
    fn from(d: &Detection) -> Self {
        Prediction {
            bbox: d.bbox,
            class_id: d.class_id,
            score: d.score,
        }
    }
}

/// Average precision of one class at IoU 0.5.
///
/// Returns `None` when the class has no ground truth.
pub fn average_precision(
    predictions: &[Vec<Prediction>],
    ground_truth: &[Vec<Annotation>],
    class_id: usize,
) -> Option<f64> {
    let n_gt: usize = ground_truth
        .iter()
        .map(|g| g.iter().filter(|a| a.class_id == class_id).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Prediction)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(img, ps)| ps.iter().filter(|p| p.class_id == class_id).map(move |p| (img, p)))
        .collect();
    // Stable sort: ties keep (image, input) order.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut matched: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (rank, (img, pred)) in ranked.iter().enumerate() {
        let best = ground_truth
            .get(*img)
            .into_iter()
            .flatten()
            .enumerate()
            .filter(|(j, a)| a.class_id == class_id && !matched[*img][*j])
            .map(|(j, a)| (j, iou(&pred.bbox, &a.bbox)))
            .fold(None::<(usize, f64)>, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            });
        if let Some((j, overlap)) = best {
            if overlap >= MATCH_IOU {
                matched[*img][j] = true;
                tp += 1;
            }
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }

    // Precision envelope from the right, then integrate over recall steps.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// Mean average precision at IoU 0.5 over the classes present in
/// `ground_truth`. Errors when there is no ground truth at all.
pub fn map50(predictions: &[Vec<Prediction>], ground_truth: &[Vec<Annotation>]) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction lists for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut classes: Vec<usize> = ground_truth.iter().flatten().map(|a| a.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| average_precision(predictions, ground_truth, c).expect("class has ground truth"))
        .sum();
    Ok(total / classes.len() as f64)
}
