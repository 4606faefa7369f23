use serde::{Deserialize, Serialize};

use crate::attention::check_capacity;
use crate::boxes::{AnchorSpec, ScaleAnchorSpec};
use crate::error::{Error, Result};

fn default_true() -> bool {
    true
}

/// One detection scale of the pyramid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub channels: usize,
    /// Side length of the (square) feature grid.
    pub grid: usize,
    pub aspect_ratios: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
    #[serde(default = "default_true")]
    pub include_extra_unit_box: bool,
}

impl ScaleConfig {
    pub fn anchor_spec(&self) -> ScaleAnchorSpec {
        ScaleAnchorSpec {
            grid_h: self.grid,
            grid_w: self.grid,
            aspect_ratios: self.aspect_ratios.clone(),
            s_min: self.s_min,
            s_max: self.s_max,
            include_extra_unit_box: self.include_extra_unit_box,
        }
    }

    pub fn boxes_per_cell(&self) -> usize {
        self.anchor_spec().boxes_per_cell()
    }
}

/// Architecture of the whole detector. Serialized as JSON for the CLI and
/// embedded in checkpoints.
///
/// The backbone is a chain of stride-2 `3×3 conv → BN → ReLU` blocks: one
/// per entry of `stem_channels`, then one per scale whose output is that
/// scale's feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub image_size: usize,
    /// Foreground classes; class 0 is background.
    pub num_classes: usize,
    pub stem_channels: Vec<usize>,
    pub scales: Vec<ScaleConfig>,
    /// Residual self-attention before every prediction head.
    #[serde(default = "default_true")]
    pub attention: bool,
    /// Fuse the next (up to two) deeper maps into the shallowest scale.
    #[serde(default = "default_true")]
    pub fusion: bool,
}

/// The three model variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Attention,
    FusionAttention,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Attention, Variant::FusionAttention];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Attention => "+att",
            Variant::FusionAttention => "+fusion+att",
        }
    }
}

impl DetectorConfig {
    /// 64×64 input, three classes, grids 8/4/2 with 32/48/64 channels.
    pub fn toy() -> Self {
        let scale = |channels, grid, s_min, s_max| ScaleConfig {
            channels,
            grid,
            aspect_ratios: vec![1.0, 2.0, 0.5],
            s_min,
            s_max,
            include_extra_unit_box: true,
        };
        Self {
            image_size: 64,
            num_classes: 3,
            stem_channels: vec![8, 16],
            scales: vec![scale(32, 8, 0.1, 0.2), scale(48, 4, 0.2, 0.4), scale(64, 2, 0.4, 0.6)],
            attention: true,
            fusion: true,
        }
    }

    /// 16×16 input, two 8-channel scales; small enough for full-model gradient checks.
    pub fn tiny() -> Self {
        let scale = |grid, s_min, s_max| ScaleConfig {
            channels: 8,
            grid,
            aspect_ratios: vec![1.0, 2.0],
            s_min,
            s_max,
            include_extra_unit_box: true,
        };
        Self {
            image_size: 16,
            num_classes: 2,
            stem_channels: vec![4],
            scales: vec![scale(4, 0.2, 0.4), scale(2, 0.4, 0.7)],
            attention: true,
            fusion: true,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.attention = variant != Variant::Baseline;
        self.fusion = variant == Variant::FusionAttention;
        self
    }

    pub fn anchor_spec(&self) -> AnchorSpec {
        AnchorSpec {
            scales: self.scales.iter().map(ScaleConfig::anchor_spec).collect(),
        }
    }

    /// Number of maps fed to the fusion block (the shallowest included).
    pub fn fusion_inputs(&self) -> usize {
        self.scales.len().min(3)
    }

    pub fn total_anchors(&self) -> usize {
        self.anchor_spec().total()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.scales.is_empty() {
            return bad("at least one detection scale is required".into());
        }
        if self.stem_channels.iter().chain(self.scales.iter().map(|s| &s.channels)).any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.fusion && self.scales.len() < 2 {
            return bad("fusion needs at least two scales".into());
        }
        let mut size = self.image_size;
        for _ in &self.stem_channels {
            size = strided(size)?;
        }
        let mut previous = usize::MAX;
        for (i, s) in self.scales.iter().enumerate() {
            size = strided(size)?;
            if s.grid != size {
                return bad(format!(
                    "scale {i} declares a {0}x{0} grid but the backbone produces {size}x{size}",
                    s.grid
                ));
            }
            if s.grid >= previous {
                return bad("grid sizes must strictly decrease".into());
            }
            previous = s.grid;
            if self.attention {
                check_capacity(s.grid * s.grid)?;
            }
            s.anchor_spec().validate()?;
        }
        Ok(())
    }
}

/// Output side of a 3×3 stride-2 padding-1 convolution.
fn strided(size: usize) -> Result<usize> {
    if size < 2 {
        return Err(Error::Config("backbone downsamples the input below 1x1".into()));
    }
    Ok((size - 1) / 2 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        DetectorConfig::toy().validate().unwrap();
        DetectorConfig::tiny().validate().unwrap();
        assert_eq!(DetectorConfig::toy().total_anchors(), (64 + 16 + 4) * 4);
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let mut c = DetectorConfig::toy();
        c.scales[1].grid = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn capacity_bound_applies_only_with_attention() {
        let mut c = DetectorConfig::toy();
        c.image_size = 512;
        c.stem_channels = vec![8];
        c.scales[0].grid = 128;
        c.scales[1].grid = 64;
        c.scales[2].grid = 32;
        assert!(matches!(c.validate(), Err(Error::Capacity { .. })));
        assert!(c.clone().with_variant(Variant::Baseline).validate().is_ok());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let c = DetectorConfig::toy();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<DetectorConfig>(&text).unwrap(), c);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut().unwrap().remove("attention");
        assert!(serde_json::from_value::<DetectorConfig>(v).unwrap().attention);
    }
}
