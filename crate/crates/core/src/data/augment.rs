use rand::Rng;

use super::Sample;
use crate::boxes::{iou, BBox, GroundTruth};

/// Minimum-IoU constraints a random crop may be drawn under.
pub const CROP_MIN_IOUS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

const CROP_TRIALS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentOptions {
    pub flip: bool,
    pub crop: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { flip: true, crop: true }
    }
}

/// Random crop, then random horizontal flip, each as enabled.
pub fn augment(sample: &Sample, opts: AugmentOptions, rng: &mut impl Rng) -> Sample {
    let mut out = if opts.crop { random_crop(sample, rng) } else { sample.clone() };
    if opts.flip && rng.random_bool(0.5) {
        out.image = out.image.flip_horizontal();
        for obj in &mut out.objects {
            let b = obj.bbox;
            obj.bbox = BBox { xmin: 1.0 - b.xmax, xmax: 1.0 - b.xmin, ..b };
        }
    }
    out
}

/// Picks the whole image or a min-IoU constraint uniformly, then tries up to
/// 50 windows of side 0.3–1 (aspect within 1/2–2) whose IoU with every object
/// meets the constraint and which contain at least one object center.
/// Kept objects are clipped to the window; the window is resized back to the
/// original resolution. Falls back to the untouched sample.
pub fn random_crop(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let mode = rng.random_range(0..=CROP_MIN_IOUS.len());
    if mode == 0 || sample.objects.is_empty() {
        return sample.clone();
    }
    let min_iou = CROP_MIN_IOUS[mode - 1];
    for _ in 0..CROP_TRIALS {
        let w = rng.random_range(0.3..1.0);
        let h = rng.random_range(0.3..1.0);
        if !(0.5..=2.0).contains(&(h / w)) {
            continue;
        }
        let left = rng.random_range(0.0..=1.0 - w);
        let top = rng.random_range(0.0..=1.0 - h);
        let window = BBox { xmin: left, ymin: top, xmax: left + w, ymax: top + h };
        if sample.objects.iter().any(|o| iou(&o.bbox, &window) < min_iou) {
            continue;
        }
        let objects: Vec<GroundTruth> = sample
            .objects
            .iter()
            .filter(|o| {
                let (cx, cy) = o.bbox.center();
                window.xmin < cx && cx < window.xmax && window.ymin < cy && cy < window.ymax
            })
            .map(|o| {
                let b = o.bbox;
                let bbox = BBox {
                    xmin: (b.xmin.max(window.xmin) - left) / w,
                    ymin: (b.ymin.max(window.ymin) - top) / h,
                    xmax: (b.xmax.min(window.xmax) - left) / w,
                    ymax: (b.ymax.min(window.ymax) - top) / h,
                }
                .clipped();
                GroundTruth { bbox, class_id: o.class_id }
            })
            .collect();
        if objects.is_empty() || objects.iter().any(|o| !o.bbox.is_valid()) {
            continue;
        }
        let image = sample.image.crop_resize(window.to_array(), sample.image.width, sample.image.height);
        return Sample { image, objects };
    }
    sample.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn augmented_samples_stay_valid() {
        let corpus = synthesize_dataset(30, 5, &SynthSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut changed = 0;
        for s in &corpus {
            let a = augment(s, AugmentOptions::default(), &mut rng);
            assert_eq!((a.image.width, a.image.height), (64, 64));
            assert!(!a.objects.is_empty());
            assert!(a.objects.iter().all(|o| o.bbox.is_valid() && (1..=3).contains(&o.class_id)));
            changed += usize::from(&a != s);
        }
        assert!(changed > 10);
    }

    #[test]
    fn flip_mirrors_boxes() {
        let s = &synthesize_dataset(1, 2, &SynthSpec::default()).unwrap()[0];
        let opts = AugmentOptions { flip: true, crop: false };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flipped = (0..20)
            .map(|_| augment(s, opts, &mut rng))
            .find(|a| a != s)
            .expect("a coin flip lands heads within 20 tries");
        for (a, b) in flipped.objects.iter().zip(&s.objects) {
            assert!((a.bbox.xmin - (1.0 - b.bbox.xmax)).abs() < 1e-12);
            assert_eq!(a.bbox.ymin, b.bbox.ymin);
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let s = &synthesize_dataset(1, 2, &SynthSpec::default()).unwrap()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(&augment(s, AugmentOptions { flip: false, crop: false }, &mut rng), s);
    }
}
