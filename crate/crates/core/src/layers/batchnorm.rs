use std::collections::BTreeMap;

use super::dims4;
use crate::error::{Error, Result};
use crate::grad::GradPair;
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel affine parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    /// γ = 1, β = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds the batch statistics of a training-mode forward into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let Some(stats) = &cache.batch_stats else {
            return;
        };
        let m = cache.count as f64;
        let unbias = if cache.count > 1 { m / (m - 1.0) } else { 1.0 };
        let mom = self.momentum;
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - mom) * *rm + mom * stats.0[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - mom) * *rv + mom * stats.1[c] * unbias;
        }
    }
}

/// What the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    /// (mean, biased variance) when normalized by batch statistics.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    count: usize,
}

impl BatchNormCache {
    pub fn batch_mean(&self) -> Option<&[f64]> {
        self.batch_stats.as_ref().map(|s| s.0.as_slice())
    }
}

/// Training mode normalizes with per-channel batch statistics; inference
/// mode uses the running estimates. Running statistics are not touched here,
/// see [`BatchNormParams::update_running`].
pub fn batch_norm(x: &Tensor, p: &BatchNormParams, training: bool) -> Result<(Tensor, BatchNormCache)> {
    let (b, c, h, w) = dims4(x, "batch_norm")?;
    if c != p.channels() {
        return Err(Error::shape("batch_norm", x.shape(), p.gamma.shape()));
    }
    let plane = h * w;
    let count = b * plane;
    let channel_values = |ch: usize| {
        (0..b).flat_map(move |n| {
            let start = (n * c + ch) * plane;
            x.data()[start..start + plane].iter().copied()
        })
    };

    let (mean, var, batch_stats) = if training {
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            mean[ch] = channel_values(ch).sum::<f64>() / count as f64;
            var[ch] = channel_values(ch).map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count as f64;
        }
        (mean.clone(), var.clone(), Some((mean, var)))
    } else {
        (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
            None,
        )
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();

    let mut xhat = x.clone();
    let mut out = x.clone();
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * plane;
            let (g, be) = (p.gamma.data()[ch], p.beta.data()[ch]);
            for i in start..start + plane {
                let v = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = v;
                out.data_mut()[i] = g * v + be;
            }
        }
    }
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            batch_stats,
            count,
        },
    ))
}

/// Gradients w.r.t. the input, `gamma` and `beta`.
pub fn batch_norm_backward(cache: &BatchNormCache, p: &BatchNormParams, grad_out: &Tensor) -> Result<GradPair> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape("batch_norm_backward", grad_out.shape(), cache.xhat.shape()));
    }
    let (b, c, h, w) = dims4(grad_out, "batch_norm_backward")?;
    let plane = h * w;
    let m = cache.count as f64;

    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * plane;
            for i in start..start + plane {
                grad_beta[ch] += grad_out.data()[i];
                grad_gamma[ch] += grad_out.data()[i] * cache.xhat.data()[i];
            }
        }
    }

    let mut grad_x = Tensor::zeros(grad_out.shape());
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * plane;
            let scale = p.gamma.data()[ch] * cache.inv_std[ch];
            for i in start..start + plane {
                let g = grad_out.data()[i];
                grad_x.data_mut()[i] = if cache.batch_stats.is_some() {
                    // dxhat = g·γ; dx = (inv_std/m)(m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    scale * (g - grad_beta[ch] / m - cache.xhat.data()[i] * grad_gamma[ch] / m)
                } else {
                    scale * g
                };
            }
        }
    }

    Ok(GradPair {
        input: grad_x,
        params: BTreeMap::from([
            ("gamma".to_string(), Tensor::new([c], grad_gamma)?),
            ("beta".to_string(), Tensor::new([c], grad_beta)?),
        ]),
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

    #[test]
    fn standardized_channel_passes_through() {
        // values ±1 have mean 0 and biased variance 1
        let x = Tensor::new([2, 1, 1, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batch_norm(&x, &BatchNormParams::new(1), true).unwrap();
        let shrink = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * shrink).abs() < 1e-12);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut p = BatchNormParams::new(2);
        p.beta = Tensor::new([2], vec![0.25, -0.5]).unwrap();
        let x = Tensor::full([3, 2, 2, 2], 4.0);
        let (y, _) = batch_norm(&x, &p, true).unwrap();
        for n in 0..3 {
            assert_eq!(y.at(&[n, 0, 1, 1]), 0.25);
            assert_eq!(y.at(&[n, 1, 0, 1]), -0.5);
        }
    }

    #[test]
    fn running_statistics_update() {
        let mut p = BatchNormParams::new(1);
        let x = Tensor::new([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, cache) = batch_norm(&x, &p, true).unwrap();
        p.update_running(&cache);
        assert!((p.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);

        let (y, cache) = batch_norm(&x, &p, false).unwrap();
        assert!(cache.batch_mean().is_none());
        let expect = (1.0 - 0.25) / (p.running_var.data()[0] + BN_EPSILON).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch() {
        assert!(batch_norm(&Tensor::zeros([1, 3, 2, 2]), &BatchNormParams::new(2), true).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for training in [true, false] {
            let x = random(&[3, 2, 2, 3], &mut rng);
            let mut p = BatchNormParams::new(2);
            p.gamma = random(&[2], &mut rng);
            p.beta = random(&[2], &mut rng);
            p.running_mean = random(&[2], &mut rng);
            p.running_var = Tensor::new([2], vec![0.7, 1.6]).unwrap();
            let probe = random(x.shape(), &mut rng);
            let (_, cache) = batch_norm(&x, &p, training).unwrap();
            let grads = batch_norm_backward(&cache, &p, &probe).unwrap();

            let loss = |x: &Tensor, p: &BatchNormParams| batch_norm(x, p, training).unwrap().0.dot(&probe).unwrap();
            let fx = finite_diff_grad(|t| loss(t, &p), &x, DEFAULT_STEP).unwrap();
            assert!(max_relative_error(&grads.input, &fx).unwrap() < 1e-4);
            let fg = finite_diff_grad(|t| loss(&x, &BatchNormParams { gamma: t.clone(), ..p.clone() }), &p.gamma, DEFAULT_STEP).unwrap();
            assert!(max_relative_error(grads.param("gamma"), &fg).unwrap() < 1e-4);
            let fb = finite_diff_grad(|t| loss(&x, &BatchNormParams { beta: t.clone(), ..p.clone() }), &p.beta, DEFAULT_STEP).unwrap();
            assert!(max_relative_error(grads.param("beta"), &fb).unwrap() < 1e-4);
        }
    }
}
