use crate::boxes::{decode_box, nms, BBox, Detection, DEFAULT_NMS_THRESHOLD};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Post-processing knobs for inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            max_detections: 200,
        }
    }
}

/// Softmax each conf row, keep foreground scores above the threshold,
/// decode and clip their boxes, run per-class NMS and keep the best
/// `max_detections`.
pub fn postprocess(loc: &Tensor, conf: &Tensor, anchors: &[BBox], opts: &DetectOptions) -> Result<Vec<Detection>> {
    for t in [opts.score_threshold, opts.nms_threshold] {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::contract(format!("thresholds must lie in (0,1), got {t}")));
        }
    }
    if loc.shape() != [anchors.len(), 4] || conf.rank() != 2 || conf.dim(0) != anchors.len() {
        return Err(Error::shape("postprocess", loc.shape(), &[anchors.len(), 4]));
    }
    let probs = conf.softmax_rows()?;
    let mut candidates = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let row = probs.row(a);
        let mut decoded = None;
        for (class_id, &score) in row.iter().enumerate().skip(1) {
            if score <= opts.score_threshold {
                continue;
            }
            let bbox = match decoded {
                Some(b) => b,
                None => {
                    let r = loc.row(a);
                    let b = decode_box(&[r[0], r[1], r[2], r[3]], anchor)?.clipped();
                    decoded = Some(b);
                    b
                }
            };
            if bbox.is_valid() {
                candidates.push(Detection { bbox, class_id, score });
            }
        }
    }
    let mut kept = nms(&candidates, opts.nms_threshold);
    kept.truncate(opts.max_detections);
    Ok(kept)
}
