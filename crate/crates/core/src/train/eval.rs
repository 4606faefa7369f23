use std::cmp::Ordering;

use serde::Serialize;

use crate::boxes::{iou, Detection, GroundTruth};
use crate::error::{Error, Result};

/// Per-class average precision and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    /// Entry `k − 1` is class `k`; `None` when the class has no ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; 0 when there are none.
    pub map: f64,
}

/// Area under the monotone precision envelope, summed over every recall step.
pub fn average_precision(is_tp: &[bool], num_truths: usize) -> f64 {
    if num_truths == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = is_tp
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            (tp as f64 / num_truths as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut envelope = 0.0f64;
    let mut ap = 0.0;
    // walk backwards so the envelope is the max precision at any higher recall
    for i in (0..points.len()).rev() {
        let (recall, precision) = points[i];
        envelope = envelope.max(precision);
        let below = if i == 0 { 0.0 } else { points[i - 1].0 };
        ap += (recall - below) * envelope;
    }
    ap
}

/// VOC-style mAP. Detections of each class are ranked by score over all
/// images; each is matched to the unused same-class truth of its image
/// with the highest IoU, counting as a true positive when that IoU is at
/// least `iou_threshold`.
pub fn evaluate_map(
    detections: &[Vec<Detection>],
    truths: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<MapReport> {
    if detections.len() != truths.len() {
        return Err(Error::contract(format!(
            "{} detection lists for {} images",
            detections.len(),
            truths.len()
        )));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::contract(format!("IoU threshold {iou_threshold} outside [0, 1]")));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let num_truths = truths.iter().flatten().filter(|t| t.class_id == class).count();
        if num_truths == 0 {
            per_class.push(None);
            continue;
        }
        let mut ranked: Vec<(usize, &Detection)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| ds.iter().map(move |d| (img, d)))
            .filter(|(_, d)| d.class_id == class)
            .collect();
        ranked.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));
        let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, d)| {
                let best = truths[img]
                    .iter()
                    .enumerate()
                    .filter(|&(j, t)| t.class_id == class && !used[img][j])
                    .map(|(j, t)| (j, iou(&d.bbox, &t.bbox)))
                    .filter(|&(_, o)| o >= iou_threshold)
                    .fold(None, |acc: Option<(usize, f64)>, cand| match acc {
                        Some(a) if a.1 >= cand.1 => Some(a),
                        _ => Some(cand),
                    });
                if let Some((j, _)) = best {
                    used[img][j] = true;
                }
                best.is_some()
            })
            .collect();
        per_class.push(Some(average_precision(&hits, num_truths)));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapReport { per_class, map })
}
