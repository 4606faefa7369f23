use std::collections::BTreeMap;

use super::dims4;
use crate::error::{Error, Result};
use crate::grad::GradPair;
use crate::tensor::{gemm, Mat, Tensor};

/// Weights `[out, in, kh, kw]`, bias `[out]`, stride and zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (out_c, _, kh, kw) = dims4(&weight, "ConvParams::new")?;
        if ![1, 3].contains(&kh) || ![1, 3].contains(&kw) {
            return Err(Error::contract(format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if bias.shape() != [out_c] {
            return Err(Error::shape("ConvParams::new", bias.shape(), &[out_c]));
        }
        if stride == 0 {
            return Err(Error::contract("stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Xavier-uniform weights and zero bias.
    pub fn init(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let k2 = kernel * kernel;
        let weight = super::xavier_uniform([out_c, in_c, kernel, kernel], in_c * k2, out_c * k2, rng);
        Self::new(weight, Tensor::zeros([out_c]), stride, padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dim(2), self.weight.dim(3))
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let span = |n: usize, k: usize| {
            let padded = n + 2 * self.padding;
            (padded >= k).then(|| (padded - k) / self.stride + 1)
        };
        match (span(h, kh), span(w, kw)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::contract(format!(
                "convolution output would be empty for {h}x{w} input"
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.oh * self.ow
    }

    /// Source pixel for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let n = self.oh * self.ow;
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((y, x)) => img[(c * self.h + y) * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let n = self.oh * self.ow;
        for c in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(oy, ox, ky, kx) {
                                img[(c * self.h + y) * self.w + x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry(x: &Tensor, p: &ConvParams, op: &'static str) -> Result<(usize, Geometry)> {
    let (b, c, h, w) = dims4(x, op)?;
    if c != p.in_channels() {
        return Err(Error::shape(op, x.shape(), p.weight.shape()));
    }
    let (kh, kw) = p.kernel();
    let (oh, ow) = p.output_size(h, w)?;
    Ok((
        b,
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride: p.stride,
            pad: p.padding,
        },
    ))
}

/// Direct cross-correlation plus bias, lowered onto a matrix product.
pub fn conv2d(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (batch, g) = geometry(x, p, "conv2d")?;
    let out_c = p.out_channels();
    let n = g.oh * g.ow;
    let in_len = g.c * g.h * g.w;
    let mut out = Tensor::zeros([batch, out_c, g.oh, g.ow]);
    let mut cols = vec![0.0; if p.is_pointwise() { 0 } else { g.cols_len() }];
    let weight = Mat::new(p.weight.data(), out_c, g.cols_rows());

    for b in 0..batch {
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        let dst = &mut out.data_mut()[b * out_c * n..(b + 1) * out_c * n];
        for (o, row) in dst.chunks_mut(n).enumerate() {
            row.fill(p.bias.data()[o]);
        }
        let cols_ref: &[f64] = if p.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        gemm(weight, Mat::new(cols_ref, g.cols_rows(), n), dst, true);
    }
    Ok(out)
}

/// Gradients of a scalar loss w.r.t. the conv input, `weight` and `bias`.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<GradPair> {
    let (batch, g) = geometry(x, p, "conv2d_backward")?;
    let out_c = p.out_channels();
    if grad_out.shape() != [batch, out_c, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            grad_out.shape(),
            &[batch, out_c, g.oh, g.ow],
        ));
    }
    let n = g.oh * g.ow;
    let in_len = g.c * g.h * g.w;
    let krows = g.cols_rows();
    let pointwise = p.is_pointwise();

    let mut grad_x = Tensor::zeros(x.shape());
    let mut grad_w = Tensor::zeros(p.weight.shape());
    let mut grad_b = Tensor::zeros([out_c]);
    let mut cols = vec![0.0; if pointwise { 0 } else { g.cols_len() }];
    let mut grad_cols = vec![0.0; g.cols_len()];
    let weight = Mat::new(p.weight.data(), out_c, krows);

    for b in 0..batch {
        let img = &x.data()[b * in_len..(b + 1) * in_len];
        let gout = &grad_out.data()[b * out_c * n..(b + 1) * out_c * n];
        for (o, row) in gout.chunks(n).enumerate() {
            grad_b.data_mut()[o] += row.iter().sum::<f64>();
        }
        let cols_ref: &[f64] = if pointwise {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        let gout_m = Mat::new(gout, out_c, n);
        gemm(gout_m, Mat::new(cols_ref, krows, n).t(), grad_w.data_mut(), true);

        let gx = &mut grad_x.data_mut()[b * in_len..(b + 1) * in_len];
        if pointwise {
            gemm(weight.t(), gout_m, gx, false);
        } else {
            gemm(weight.t(), gout_m, &mut grad_cols, false);
            g.col2im(&grad_cols, gx);
        }
    }

    Ok(GradPair {
        input: grad_x,
        params: BTreeMap::from([("weight".to_string(), grad_w), ("bias".to_string(), grad_b)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{finite_diff_grad, max_relative_error, DEFAULT_STEP};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops straight from the definition of cross-correlation.
    fn naive_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let (b, c, h, w) = dims4(x, "naive").unwrap();
        let (o, _, kh, kw) = dims4(&p.weight, "naive").unwrap();
        let (oh, ow) = p.output_size(h, w).unwrap();
        let mut out = Tensor::zeros([b, o, oh, ow]);
        for n in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let xx = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                        acc += p.weight.at(&[oc, ic, ky, kx])
                                            * x.at(&[n, ic, y as usize, xx as usize]);
                                    }
                                }
                            }
                        }
                        out.set(&[n, oc, oy, ox], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pointwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[2, 4, 3, 5], &mut rng);
        let w = Tensor::eye(4).into_reshape([4, 4, 1, 1]).unwrap();
        let p = ConvParams::new(w, Tensor::zeros([4]), 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let x = Tensor::full([1, 1, 5, 5], 0.3);
        let p = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1]), 1, 1).unwrap();
        let y = conv2d(&x, &p).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert!((y.at(&[0, 0, r, c]) - 2.7).abs() < 1e-12);
            }
        }
        assert!((y.at(&[0, 0, 0, 0]) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = random(&[2, 4, 6, 6], &mut rng);
            let p = ConvParams::new(random(&[8, 4, 3, 3], &mut rng), random(&[8], &mut rng), stride, pad)
                .unwrap();
            let fast = conv2d(&x, &p).unwrap();
            assert!(fast.max_abs_diff(&naive_conv(&x, &p)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn output_size_formula() {
        let p = ConvParams::new(Tensor::zeros([2, 3, 3, 3]), Tensor::zeros([2]), 2, 1).unwrap();
        assert_eq!(p.output_size(64, 64).unwrap(), (32, 32));
        assert_eq!(p.output_size(7, 5).unwrap(), (4, 3));
        let q = ConvParams::new(Tensor::zeros([2, 3, 3, 3]), Tensor::zeros([2]), 1, 0).unwrap();
        assert!(q.output_size(2, 2).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ConvParams::new(Tensor::zeros([2, 3, 3, 3]), Tensor::zeros([2]), 1, 1).unwrap();
        assert!(matches!(conv2d(&Tensor::zeros([1, 4, 5, 5]), &p), Err(Error::Shape { .. })));
        assert!(ConvParams::new(Tensor::zeros([2, 3, 5, 5]), Tensor::zeros([2]), 1, 1).is_err());
        assert!(ConvParams::new(Tensor::zeros([2, 3, 3, 3]), Tensor::zeros([3]), 1, 1).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let x = random(&[2, 3, 5, 5], &mut rng);
            let p = ConvParams::new(random(&[4, 3, k, k], &mut rng), random(&[4], &mut rng), stride, pad)
                .unwrap();
            let probe = random(conv2d(&x, &p).unwrap().shape(), &mut rng);
            let grads = conv2d_backward(&x, &p, &probe).unwrap();

            let fx = finite_diff_grad(|t| conv2d(t, &p).unwrap().dot(&probe).unwrap(), &x, DEFAULT_STEP)
                .unwrap();
            assert!(max_relative_error(&grads.input, &fx).unwrap() < 1e-4);

            let fw = finite_diff_grad(
                |t| {
                    let q = ConvParams { weight: t.clone(), ..p.clone() };
                    conv2d(&x, &q).unwrap().dot(&probe).unwrap()
                },
                &p.weight,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(max_relative_error(grads.param("weight"), &fw).unwrap() < 1e-4);

            let fb = finite_diff_grad(
                |t| {
                    let q = ConvParams { bias: t.clone(), ..p.clone() };
                    conv2d(&x, &q).unwrap().dot(&probe).unwrap()
                },
                &p.bias,
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(max_relative_error(grads.param("bias"), &fb).unwrap() < 1e-4);
        }
    }
}
