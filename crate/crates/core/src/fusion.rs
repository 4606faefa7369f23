//! Semantic fusion: deeper maps are bilinearly upsampled to the shallowest
//! map's grid, concatenated after it along channels, and projected back to
//! its channel count by an affine 1×1 transform.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{bilinear_upsample, bilinear_upsample_backward, dims4, xavier_uniform};
use crate::tensor::{gemm, Mat, Tensor};

/// `weight` is `[C_out, ΣC_in]` applied as a 1×1 convolution; `bias` is `[C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl FusionParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let out = match weight.shape() {
            &[o, _] => o,
            other => return Err(Error::shape("FusionParams", other, &[0, 0])),
        };
        if bias.shape() != [out] {
            return Err(Error::shape("FusionParams", bias.shape(), &[out]));
        }
        Ok(Self { weight, bias })
    }

    /// `input_channels[0]` is the map being enriched; it fixes the output width.
    pub fn init(input_channels: &[usize], rng: &mut impl rand::Rng) -> Self {
        let out = input_channels[0];
        let total: usize = input_channels.iter().sum();
        Self {
            weight: xavier_uniform([out, total], total, out, rng),
            bias: Tensor::zeros([out]),
        }
    }

    /// Projection that copies the first map and ignores the rest.
    pub fn identity_block(out_channels: usize, total_channels: usize) -> Self {
        let mut weight = Tensor::zeros([out_channels, total_channels]);
        for c in 0..out_channels {
            weight.set(&[c, c], 1.0);
        }
        Self {
            weight,
            bias: Tensor::zeros([out_channels]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }
}

fn check(inputs: &[&Tensor], p: &FusionParams) -> Result<(usize, usize, usize, Vec<usize>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("fusion needs at least one input"))?;
    let (b, c0, h, w) = dims4(first, "fuse")?;
    let mut channels = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (bi, ci, hi, wi) = dims4(x, "fuse")?;
        if bi != b || hi > h || wi > w {
            return Err(Error::shape("fuse", x.shape(), first.shape()));
        }
        channels.push(ci);
    }
    let total: usize = channels.iter().sum();
    if p.in_channels() != total || p.out_channels() != c0 {
        return Err(Error::shape("fuse", &[c0, total], p.weight.shape()));
    }
    Ok((b, h, w, channels))
}

/// Upsamples every input to the first one's grid and stacks them along channels.
fn concat(inputs: &[&Tensor], b: usize, h: usize, w: usize, channels: &[usize]) -> Result<Tensor> {
    let total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = Tensor::zeros([b, total, h, w]);
    let mut offset = 0;
    for (x, &c) in inputs.iter().zip(channels) {
        let up = if x.dim(2) == h && x.dim(3) == w {
            (*x).clone()
        } else {
            bilinear_upsample(x, h, w)?
        };
        for n in 0..b {
            let src = &up.data()[n * c * plane..(n + 1) * c * plane];
            let dst_start = (n * total + offset) * plane;
            out.data_mut()[dst_start..dst_start + c * plane].copy_from_slice(src);
        }
        offset += c;
    }
    Ok(out)
}

/// Fused map with the first input's shape.
pub fn fuse(inputs: &[&Tensor], p: &FusionParams) -> Result<Tensor> {
    let (b, h, w, channels) = check(inputs, p)?;
    let stacked = concat(inputs, b, h, w, &channels)?;
    let (out_c, total, plane) = (p.out_channels(), p.in_channels(), h * w);
    let mut out = Tensor::zeros([b, out_c, h, w]);
    for n in 0..b {
        let dst = &mut out.data_mut()[n * out_c * plane..(n + 1) * out_c * plane];
        for (o, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(p.bias.data()[o]);
        }
        let src = &stacked.data()[n * total * plane..(n + 1) * total * plane];
        gemm(Mat::new(p.weight.data(), out_c, total), Mat::new(src, total, plane), dst, true);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct FuseGrads {
    /// One gradient per input, each shaped like that input.
    pub inputs: Vec<Tensor>,
    /// `weight` and `bias`.
    pub params: BTreeMap<String, Tensor>,
}

pub fn fuse_backward(inputs: &[&Tensor], p: &FusionParams, grad_out: &Tensor) -> Result<FuseGrads> {
    let (b, h, w, channels) = check(inputs, p)?;
    let (out_c, total, plane) = (p.out_channels(), p.in_channels(), h * w);
    if grad_out.shape() != [b, out_c, h, w] {
        return Err(Error::shape("fuse_backward", grad_out.shape(), &[b, out_c, h, w]));
    }
    let stacked = concat(inputs, b, h, w, &channels)?;
    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = Tensor::zeros([out_c]);
    let mut grad_stacked = Tensor::zeros(stacked.shape());
    for n in 0..b {
        let g = &grad_out.data()[n * out_c * plane..(n + 1) * out_c * plane];
        for (o, row) in g.chunks(plane).enumerate() {
            grad_b.data_mut()[o] += row.iter().sum::<f64>();
        }
        let gm = Mat::new(g, out_c, plane);
        let src = &stacked.data()[n * total * plane..(n + 1) * total * plane];
        gemm(gm, Mat::new(src, total, plane).t(), grad_w.data_mut(), true);
        let dst = &mut grad_stacked.data_mut()[n * total * plane..(n + 1) * total * plane];
        gemm(Mat::new(p.weight.data(), out_c, total).t(), gm, dst, false);
    }

    let mut grads = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for (x, &c) in inputs.iter().zip(&channels) {
        let mut part = Tensor::zeros([b, c, h, w]);
        for n in 0..b {
            let start = (n * total + offset) * plane;
            part.data_mut()[n * c * plane..(n + 1) * c * plane]
                .copy_from_slice(&grad_stacked.data()[start..start + c * plane]);
        }
        grads.push(if x.dim(2) == h && x.dim(3) == w {
            part
        } else {
            bilinear_upsample_backward(x.shape(), &part)?
        });
        offset += c;
    }
    Ok(FuseGrads {
        inputs: grads,
        params: BTreeMap::from([("weight".to_string(), grad_w), ("bias".to_string(), grad_b)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_pass_through() {
        let x3 = Tensor::full([1, 2, 4, 4], 1.0);
        let x4 = Tensor::full([1, 3, 2, 2], -2.0);
        let x5 = Tensor::full([1, 1, 1, 1], 0.5);
        let weight = Tensor::new([2, 6], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let p = FusionParams::new(weight.clone(), Tensor::zeros([2])).unwrap();
        let y = fuse(&[&x3, &x4, &x5], &p).unwrap();
        let consts = [1.0, 1.0, -2.0, -2.0, -2.0, 0.5];
        for o in 0..2 {
            let expect: f64 = (0..6).map(|j| weight.at(&[o, j]) * consts[j]).sum();
            for i in 0..16 {
                assert!((y.data()[o * 16 + i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_block_returns_shallow_map() {
        let x3 = Tensor::new([2, 2, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let x4 = Tensor::full([2, 3, 1, 1], 9.0);
        let p = FusionParams::identity_block(2, 5);
        assert_eq!(fuse(&[&x3, &x4], &p).unwrap(), x3);
    }

    #[test]
    fn bias_gradient_is_spatial_sum() {
        let x3 = Tensor::full([2, 2, 3, 3], 0.3);
        let x4 = Tensor::full([2, 1, 2, 2], 0.1);
        let p = FusionParams::new(Tensor::full([2, 3], 0.2), Tensor::zeros([2])).unwrap();
        let g = Tensor::new([2, 2, 3, 3], (0..36).map(|v| v as f64).collect()).unwrap();
        let grads = fuse_backward(&[&x3, &x4], &p, &g).unwrap();
        let b = grads.params["bias"].data();
        let expect0: f64 = (0..9).chain(18..27).map(|v| v as f64).sum();
        assert_eq!(b[0], expect0);

        let zero = fuse_backward(&[&x3, &x4], &p, &Tensor::zeros([2, 2, 3, 3])).unwrap();
        assert!(zero.inputs.iter().all(|t| t.max_abs() == 0.0));
        assert!(zero.params.values().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn rejects_inconsistent_channels() {
        let x3 = Tensor::zeros([1, 2, 4, 4]);
        let x4 = Tensor::zeros([1, 3, 2, 2]);
        let p = FusionParams::identity_block(2, 4);
        assert!(fuse(&[&x3, &x4], &p).is_err());
        let big = Tensor::zeros([1, 3, 8, 8]);
        assert!(fuse(&[&x3, &big], &FusionParams::identity_block(2, 5)).is_err());
    }
}
