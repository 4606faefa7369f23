//! Attention-row overlays.

use crate::attention::{extract_query_row, AttentionMap};
use crate::data::RgbImage;
use crate::error::{Error, Result};

/// Opacity of the color map over the source image.
pub const OVERLAY_ALPHA: f64 = 0.5;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Blue (`t = 0`) to red (`t = 1`).
pub fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [255.0 * t, 0.0, 255.0 * (1.0 - t)]
}

/// Query row of `map` upsampled to `width × height` and min-max normalized
/// to `[0, 1]`. A constant row yields all zeros.
pub fn heat_plane(map: &AttentionMap, query: usize, width: usize, height: usize) -> Result<Vec<f64>> {
    if query >= map.locations() {
        return Err(Error::contract(format!(
            "query {query} outside a {}x{} grid",
            map.width, map.height
        )));
    }
    if width < map.width || height < map.height {
        return Err(Error::contract("overlay must be at least as large as the attention grid"));
    }
    let row = extract_query_row(map, query)?;
    let sum: f64 = row.data().iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::contract(format!("attention row sums to {sum}, not 1")));
    }
    let (lo, hi) = min_max(row.data());
    if hi - lo <= 0.0 {
        return Ok(vec![0.0; width * height]);
    }
    let up = RgbImage::upsample_plane(row.data(), map.width, map.height, width, height);
    let (lo, hi) = min_max(&up);
    Ok(up.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Heat plane rendered through [`ramp`] and alpha-blended over `image`.
pub fn render_overlay(image: &RgbImage, map: &AttentionMap, query: usize) -> Result<RgbImage> {
    let heat = heat_plane(map, query, image.width, image.height)?;
    let mut out = image.clone();
    for (px, &t) in out.pixels.chunks_mut(3).zip(&heat) {
        let color = ramp(t);
        for (c, v) in px.iter_mut().enumerate() {
            *v = ((1.0 - OVERLAY_ALPHA) * *v as f64 + OVERLAY_ALPHA * color[c]).round() as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn map_from_row(row: &[f64], side: usize) -> AttentionMap {
        let n = side * side;
        let mut scores = Vec::with_capacity(n * n);
        for _ in 0..n {
            scores.extend_from_slice(row);
        }
        AttentionMap {
            scores: Tensor::new([n, n], scores).unwrap(),
            scale: 0,
            height: side,
            width: side,
        }
    }

    #[test]
    fn uniform_row_is_flat() {
        let map = map_from_row(&[0.25; 4], 2);
        let img = RgbImage::new(8, 8);
        let out = render_overlay(&img, &map, 3).unwrap();
        assert!(out.pixels.chunks(3).all(|p| p == [0, 0, 128]));
    }

    #[test]
    fn peak_lands_in_its_cell() {
        let map = map_from_row(&[0.1, 0.2, 0.6, 0.1], 2);
        let heat = heat_plane(&map, 0, 16, 16).unwrap();
        let (best, _) = heat
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        // entry 2 is the bottom-left cell
        assert!(best / 16 >= 8 && best % 16 < 8);
        assert!(heat.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_rows_and_queries() {
        assert!(heat_plane(&map_from_row(&[0.5, 0.6, 0.0, 0.0], 2), 0, 4, 4).is_err());
        assert!(heat_plane(&map_from_row(&[0.25; 4], 2), 4, 4, 4).is_err());
    }
}
