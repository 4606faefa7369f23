//! Convolution, batch normalization and bilinear upsampling, each with a
//! hand-written backward pass. Feature maps are rank-4 `[batch, channels,
//! height, width]` tensors.

mod batchnorm;
mod conv;
mod upsample;

pub use batchnorm::{batch_norm, batch_norm_backward, BatchNormCache, BatchNormParams};
pub use conv::{conv2d, conv2d_backward, ConvParams};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward, source_coordinate};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(batch, channels, height, width)` of a feature map.
pub fn dims4(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        other => Err(Error::shape(op, other, &[0, 0, 0, 0])),
    }
}

/// ReLU backward: passes `grad` where the forward output was positive.
pub fn relu_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if output.shape() != grad.shape() {
        return Err(Error::shape("relu_backward", output.shape(), grad.shape()));
    }
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape(), data)
}

/// Uniform Glorot/Xavier initialization in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl rand::Rng,
) -> Tensor {
    let shape = shape.into();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}
