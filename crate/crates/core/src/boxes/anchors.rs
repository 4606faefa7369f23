use serde::{Deserialize, Serialize};

use super::BBox;
use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

/// Anchor layout for one feature-map scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleAnchorSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub aspect_ratios: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    /// Adds a second ratio-1 box of size `sqrt(s_min·s_max)` per cell.
    #[serde(default = "default_true")]
    pub include_extra_unit_box: bool,
}

impl ScaleAnchorSpec {
    pub fn boxes_per_cell(&self) -> usize {
        self.aspect_ratios.len() + usize::from(self.include_extra_unit_box)
    }

    pub fn anchor_count(&self) -> usize {
        self.grid_h * self.grid_w * self.boxes_per_cell()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::contract(format!(
                "degenerate anchor grid {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        if !(0.0 < self.s_min && self.s_min < self.s_max && self.s_max <= 1.0) {
            return Err(Error::contract(format!(
                "anchor scales need 0 < s_min < s_max <= 1, got {} and {}",
                self.s_min, self.s_max
            )));
        }
        if self.boxes_per_cell() == 0 {
            return Err(Error::contract("scale has no anchor boxes"));
        }
        if let Some(ar) = self.aspect_ratios.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::contract(format!("aspect ratio must be positive, got {ar}")));
        }
        Ok(())
    }

    /// `(size, aspect ratio)` of each box in a cell, in emission order.
    pub fn cell_shapes(&self) -> Vec<(f64, f64)> {
        let mut shapes: Vec<_> = self.aspect_ratios.iter().map(|&ar| (self.s_min, ar)).collect();
        if self.include_extra_unit_box {
            shapes.push(((self.s_min * self.s_max).sqrt(), 1.0));
        }
        shapes
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub scales: Vec<ScaleAnchorSpec>,
}

impl AnchorSpec {
    pub fn total(&self) -> usize {
        self.scales.iter().map(ScaleAnchorSpec::anchor_count).sum()
    }
}

/// One generated anchor with its pre-clipping geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub scale_index: usize,
    pub size: f64,
    pub aspect_ratio: f64,
    pub cx: f64,
    pub cy: f64,
    /// `size·sqrt(aspect_ratio)`, before clipping.
    pub width: f64,
    /// `size/sqrt(aspect_ratio)`, before clipping.
    pub height: f64,
    pub bbox: BBox,
}

/// All anchors, scale by scale, cells in row-major order, boxes within a
/// cell in [`ScaleAnchorSpec::cell_shapes`] order.
pub fn generate_anchors_detailed(spec: &AnchorSpec) -> Result<Vec<Anchor>> {
    let mut out = Vec::with_capacity(spec.total());
    for (scale_index, s) in spec.scales.iter().enumerate() {
        s.validate()?;
        let shapes = s.cell_shapes();
        for j in 0..s.grid_h {
            let cy = (j as f64 + 0.5) / s.grid_h as f64;
            for i in 0..s.grid_w {
                let cx = (i as f64 + 0.5) / s.grid_w as f64;
                for &(size, ar) in &shapes {
                    let width = size * ar.sqrt();
                    let height = size / ar.sqrt();
                    out.push(Anchor {
                        scale_index,
                        size,
                        aspect_ratio: ar,
                        cx,
                        cy,
                        width,
                        height,
                        bbox: BBox::from_center(cx, cy, width, height).clipped(),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn generate_anchors(spec: &AnchorSpec) -> Result<Vec<BBox>> {
    Ok(generate_anchors_detailed(spec)?.into_iter().map(|a| a.bbox).collect())
}
