use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{write_atomically, RgbImage};
use super::Sample;
use crate::boxes::GroundTruth;
use crate::error::{Error, Result};

/// One manifest row: an image path relative to the manifest plus its objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub objects: Vec<GroundTruth>,
}

/// JSON index of a labelled corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        for entry in &self.samples {
            for obj in &entry.objects {
                if !obj.bbox.is_valid() {
                    return Err(Error::Format(format!("{}: invalid box {:?}", entry.image, obj.bbox)));
                }
                let in_range = obj.class_id >= 1 && num_classes.is_none_or(|k| obj.class_id <= k);
                if !in_range {
                    return Err(Error::Format(format!("{}: class {} out of range", entry.image, obj.class_id)));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.validate(None)?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomically(path, text.as_bytes())
    }
}

fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a manifest and every image it references.
pub fn load_samples(manifest_path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = manifest_path.as_ref();
    let manifest = DatasetManifest::load(path)?;
    let dir = base_dir(path);
    manifest
        .samples
        .into_iter()
        .map(|entry| {
            Ok(Sample {
                image: RgbImage::read_ppm(dir.join(&entry.image))?,
                objects: entry.objects,
            })
        })
        .collect()
}

/// Writes `img_NNNNN.ppm` files and `manifest.json` into `dir`; returns the manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = DatasetManifest::default();
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("img_{i:05}.ppm");
        sample.image.write_ppm(dir.join(&name))?;
        manifest.samples.push(ManifestEntry {
            image: name,
            objects: sample.objects.clone(),
        });
    }
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
