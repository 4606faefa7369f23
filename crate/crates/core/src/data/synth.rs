use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::RgbImage;
use super::Sample;
use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};

/// Shape classes emitted by the generator, numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square = 1,
    Disc = 2,
    Triangle = 3,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// Whether the pixel at offset `(dx, dy)` inside a `size × size` box is covered.
    fn covers(self, dx: usize, dy: usize, size: usize) -> bool {
        let s = size as f64;
        let (px, py) = (dx as f64 + 0.5, dy as f64 + 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disc => {
                let r = s / 2.0;
                (px - r).powi(2) + (py - r).powi(2) <= r * r
            }
            // apex at top center, base along the bottom edge
            ShapeKind::Triangle => (px - s / 2.0).abs() <= (py + 0.5) / 2.0,
        }
    }
}

const PALETTE: [[u8; 3]; 6] = [
    [230, 60, 60],
    [60, 210, 80],
    [70, 110, 240],
    [240, 220, 60],
    [220, 80, 220],
    [70, 220, 230],
];

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side as a fraction of the image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Background pixels are uniform in `0..background_max`.
    pub background_max: u8,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            min_size: 0.1,
            max_size: 0.4,
            background_max: 110,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let ok = self.image_size >= 8
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.max_objects <= PALETTE.len()
            && 0.0 < self.min_size
            && self.min_size <= self.max_size
            && self.max_size <= 0.5;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic dataset spec {self:?}")));
        }
        Ok(())
    }
}

/// `n` images of non-overlapping squares, discs and triangles on noise.
/// Image `i` depends only on `(seed, i)`.
pub fn synthesize_dataset(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::contract("dataset size must be at least 1"));
    }
    spec.validate()?;
    Ok((0..n).map(|i| synthesize_image(seed, i as u64, spec)).collect())
}

fn synthesize_image(seed: u64, index: u64, spec: &SynthSpec) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = spec.image_size;
    let mut image = RgbImage::new(side, side);
    for v in image.pixels.iter_mut() {
        *v = rng.random_range(0..spec.background_max);
    }

    let lo = ((spec.min_size * side as f64).ceil() as usize).max(3);
    let hi = ((spec.max_size * side as f64).floor() as usize).max(lo);
    let wanted = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    let mut placed: Vec<(usize, usize, usize)> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..wanted {
        let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
        let size = rng.random_range(lo..=hi);
        let spot = (0..100).find_map(|_| {
            let x = rng.random_range(0..=side - size);
            let y = rng.random_range(0..=side - size);
            // one pixel of clearance between shapes
            let clear = placed.iter().all(|&(px, py, ps)| {
                x > px + ps || px > x + size || y > py + ps || py > y + size
            });
            clear.then_some((x, y))
        });
        let Some((x, y)) = spot else { continue };
        let color = PALETTE[colors.swap_remove(rng.random_range(0..colors.len()))];
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for dy in 0..size {
            for dx in 0..size {
                if kind.covers(dx, dy, size) {
                    image.put(x + dx, y + dy, color);
                    x0 = x0.min(x + dx);
                    y0 = y0.min(y + dy);
                    x1 = x1.max(x + dx + 1);
                    y1 = y1.max(y + dy + 1);
                }
            }
        }
        placed.push((x, y, size));
        let s = side as f64;
        let bbox = BBox::new(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s)
            .expect("rasterized shapes lie inside the image");
        objects.push(GroundTruth { bbox, class_id: kind.class_id() });
    }
    Sample { image, objects }
}
