//! Images, the synthetic shapes corpus, manifests and augmentation.

mod augment;
mod image;
mod manifest;
mod synth;

pub use augment::{augment, random_crop, AugmentOptions, CROP_MIN_IOUS};
pub use image::{write_atomically, RgbImage};
pub use manifest::{load_samples, write_corpus, DatasetManifest, ManifestEntry};
pub use synth::{synthesize_dataset, ShapeKind, SynthSpec};

use crate::boxes::GroundTruth;

/// An image with its labelled objects.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub objects: Vec<GroundTruth>,
}
