//! The assembled detector: configuration, parameters, forward/backward,
//! multibox loss and inference post-processing.

mod config;
mod detect;
mod loss;
mod model;
mod params;

pub use config::{DetectorConfig, ScaleConfig, Variant};
pub use detect::{postprocess, DetectOptions};
pub use loss::{multibox_loss, smooth_l1, smooth_l1_grad, LossOutput};
pub use model::{backward, forward, update_running_stats, ForwardPass};
pub use params::{ConvBlock, Head, ModelParams, ParamGrads};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionMap;
use crate::boxes::{generate_anchors, BBox, Detection};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A configuration, its parameters and the matching anchor set.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ModelParams,
    anchors: Vec<BBox>,
}

impl Detector {
    pub fn new(config: DetectorConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let anchors = generate_anchors(&config.anchor_spec())?;
        Ok(Self {
            config,
            params,
            anchors,
        })
    }

    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Self::new(config, params)
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn forward(&self, images: &Tensor, training: bool) -> Result<ForwardPass> {
        forward(images, &self.params, &self.config, training)
    }

    /// Inference on a single `[3, H, W]` (or `[1, 3, H, W]`) image.
    pub fn detect(&self, image: &Tensor, opts: &DetectOptions) -> Result<Vec<Detection>> {
        let pass = self.forward(&as_batch(image)?, false)?;
        postprocess(&pass.loc[0], &pass.conf[0], &self.anchors, opts)
    }

    /// Attention maps of every scale for a single image (inference mode).
    pub fn attention_maps(&self, image: &Tensor) -> Result<Vec<AttentionMap>> {
        if !self.config.attention {
            return Err(Error::Config("model has no attention units".into()));
        }
        let pass = self.forward(&as_batch(image)?, false)?;
        Ok(pass.attention.into_iter().map(|mut maps| maps.remove(0)).collect())
    }
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [c, h, w] => image.reshape([1, *c, *h, *w]),
        [1, _, _, _] => Ok(image.clone()),
        other => Err(Error::shape("detect", other, &[3, 0, 0])),
    }
}
