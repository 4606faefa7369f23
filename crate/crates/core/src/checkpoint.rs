//! Binary model files.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "ASSD" | version | config_len | config JSON | tensor_count
//!   then per tensor: name_len | name | rank | dims... | f32 values
//! ```
//!
//! Parameters are stored in single precision, so `load` rounds every value
//! to the nearest `f32`; a load/save cycle is byte-stable.

use std::path::Path;

use crate::data::write_atomically;
use crate::detector::{Detector, DetectorConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"ASSD";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(out, bytes.len())?;
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn encode(detector: &Detector) -> Result<Vec<u8>> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_bytes(&mut out, serde_json::to_string(&detector.config)?.as_bytes())?;
    let tensors = detector.params.named_tensors();
    put_u32(&mut out, tensors.len())?;
    for (name, t) in &tensors {
        put_bytes(&mut out, name.as_bytes())?;
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<&'a str> {
        let len = self.u32()?;
        std::str::from_utf8(self.take(len)?).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Detector> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: DetectorConfig = serde_json::from_str(r.string()?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string()?.to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    Detector::new(config.clone(), ModelParams::from_named(&config, tensors)?)
}

/// Writes atomically: the file appears only once fully written.
pub fn save(path: impl AsRef<Path>, detector: &Detector) -> Result<()> {
    write_atomically(path, &encode(detector)?)
}

pub fn load(path: impl AsRef<Path>) -> Result<Detector> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
