//! Detection geometry: boxes, IoU, offset encoding, anchors, matching,
//! hard negative mining and non-maximum suppression.

mod anchors;
mod matching;
mod nms;

pub use anchors::{generate_anchors, generate_anchors_detailed, Anchor, AnchorSpec, ScaleAnchorSpec};
pub use matching::{hard_negative_mine, match_anchors, MatchResult, DEFAULT_MATCH_THRESHOLD, DEFAULT_NEG_POS_RATIO};
pub use nms::{nms, DEFAULT_NMS_THRESHOLD};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Center-offset variance used by [`encode_box`].
pub const CENTER_VARIANCE: f64 = 0.1;
/// Log-size variance used by [`encode_box`].
pub const SIZE_VARIANCE: f64 = 0.2;

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// A box with positive extent inside `[0, 1]²`.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self> {
        let b = Self { xmin, ymin, xmax, ymax };
        if !b.is_valid() {
            return Err(Error::contract(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            xmin: cx - w / 2.0,
            ymin: cy - h / 2.0,
            xmax: cx + w / 2.0,
            ymax: cy + h / 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        coords.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.xmin + self.xmax) / 2.0, (self.ymin + self.ymax) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn clipped(&self) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, 1.0),
            ymin: self.ymin.clamp(0.0, 1.0),
            xmax: self.xmax.clamp(0.0, 1.0),
            ymax: self.ymax.clamp(0.0, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }
}

/// A labelled ground-truth object; classes are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
}

/// A scored prediction; `class_id` is never the background class 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

/// Intersection over union; 0 when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn positive_extent(b: &BBox, what: &str) -> Result<()> {
    if b.width() > 0.0 && b.height() > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} box needs positive width and height: {b:?}")))
    }
}

/// Offsets of `truth` relative to `anchor`: scaled center shift and log size ratio.
pub fn encode_box(truth: &BBox, anchor: &BBox) -> Result<[f64; 4]> {
    positive_extent(truth, "truth")?;
    positive_extent(anchor, "anchor")?;
    let (gx, gy) = truth.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok([
        (gx - ax) / (aw * CENTER_VARIANCE),
        (gy - ay) / (ah * CENTER_VARIANCE),
        (truth.width() / aw).ln() / SIZE_VARIANCE,
        (truth.height() / ah).ln() / SIZE_VARIANCE,
    ])
}

/// Inverse of [`encode_box`]. The result is not clipped.
pub fn decode_box(offsets: &[f64; 4], anchor: &BBox) -> Result<BBox> {
    positive_extent(anchor, "anchor")?;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BBox::from_center(
        ax + offsets[0] * CENTER_VARIANCE * aw,
        ay + offsets[1] * CENTER_VARIANCE * ah,
        aw * (offsets[2] * SIZE_VARIANCE).exp(),
        ah * (offsets[3] * SIZE_VARIANCE).exp(),
    ))
}
