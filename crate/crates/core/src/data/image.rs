use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::source_coordinate;
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[3, H, W]` planar tensor with values `v/255 − 0.5`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0 - 0.5;
            }
        }
        Tensor::new([3, self.height, self.width], data).expect("plane sizes agree")
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Bilinearly resamples the normalized window `[x0, x1] × [y0, y1]` to `width × height`.
    pub fn crop_resize(&self, window: [f64; 4], width: usize, height: usize) -> Self {
        let [x0, y0, x1, y1] = window;
        let mut out = Self::new(width, height);
        for oy in 0..height {
            let sy = (y0 + (oy as f64 + 0.5) / height as f64 * (y1 - y0)) * self.height as f64 - 0.5;
            for ox in 0..width {
                let sx = (x0 + (ox as f64 + 0.5) / width as f64 * (x1 - x0)) * self.width as f64 - 0.5;
                out.put(ox, oy, self.sample(sx, sy));
            }
        }
        out
    }

    fn sample(&self, sx: f64, sy: f64) -> [u8; 3] {
        let sx = sx.clamp(0.0, (self.width - 1) as f64);
        let sy = sy.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let mut px = [0u8; 3];
        for (c, out) in px.iter_mut().enumerate() {
            let v = |x: usize, y: usize| self.get(x, y)[c] as f64;
            let top = v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx;
            let bottom = v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx;
            *out = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
        }
        px
    }

    /// Half-pixel bilinear resize to a larger-or-equal size (used for overlays).
    pub fn upsample_plane(values: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
        let rows: Vec<_> = (0..out_h).map(|y| source_coordinate(y, h, out_h)).collect();
        let cols: Vec<_> = (0..out_w).map(|x| source_coordinate(x, w, out_w)).collect();
        let mut out = Vec::with_capacity(out_w * out_h);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
                let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        out
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut header = Vec::new();
        // magic, width, height, maxval; '#' comments allowed between tokens
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))? == 0 {
                return Err(Error::Format("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            header.extend(content.split_whitespace().map(str::to_string));
        }
        if header.len() > 4 {
            return Err(Error::Format("unexpected data on the PPM header line".into()));
        }
        if header[0] != "P6" {
            return Err(Error::Format(format!("expected P6 magic, found {}", header[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header value {s}")));
        let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit PPM is supported, maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("empty PPM image".into()));
        }
        let mut pixels = Vec::new();
        reader.read_to_end(&mut pixels).map_err(|e| Error::Format(e.to_string()))?;
        if pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "PPM payload has {} bytes, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::decode_ppm(&bytes)
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomically(path, &self.encode_ppm())
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomically(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
