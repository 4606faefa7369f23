use std::collections::BTreeMap;

use crate::detector::{ModelParams, ParamGrads};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with momentum, L2 weight decay and a step schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter name, created lazily at the first step.
    pub velocities: BTreeMap<String, Tensor>,
    /// `(epoch, multiplier)`: from `epoch` on, the rate is scaled by `multiplier`.
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerState {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 0.0005;

    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64, schedule: Vec<(usize, f64)>) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocities: BTreeMap::new(),
            schedule,
        }
    }

    /// Base rate times every multiplier whose epoch has been reached.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(
            Self::DEFAULT_LEARNING_RATE,
            Self::DEFAULT_MOMENTUM,
            Self::DEFAULT_WEIGHT_DECAY,
            Vec::new(),
        )
    }
}

/// `g' = g + wd·θ; v ← m·v + g'; θ ← θ − lr·v` on one tensor.
pub fn sgd_update(
    theta: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.shape() != theta.shape() {
        return Err(Error::shape("sgd_update", grad.shape(), theta.shape()));
    }
    if velocity.shape() != theta.shape() {
        return Err(Error::shape("sgd_update", velocity.shape(), theta.shape()));
    }
    for ((t, &g), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
    Ok(())
}

/// One update of every learnable tensor at rate `lr`. `grads` must name
/// exactly the learnable tensors.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, state: &mut OptimizerState, lr: f64) -> Result<()> {
    let mut seen = 0;
    let mut status = Ok(());
    let (momentum, wd) = (state.momentum, state.weight_decay);
    let velocities = &mut state.velocities;
    params.visit_mut(|name, theta| {
        if status.is_err() {
            return;
        }
        let Some(g) = grads.get(name) else {
            status = Err(Error::contract(format!("no gradient for {name}")));
            return;
        };
        seen += 1;
        let v = velocities
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        status = sgd_update(theta, g, v, lr, momentum, wd);
    });
    status?;
    if seen != grads.len() {
        return Err(Error::contract("gradients name tensors the model does not have"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn plain_gradient_descent() {
        let mut theta = t(&[1.0, -2.0]);
        let mut v = Tensor::zeros([2]);
        sgd_update(&mut theta, &t(&[0.5, 1.0]), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(theta, t(&[0.95, -2.1]));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut theta = t(&[3.0]);
        let mut v = Tensor::zeros([1]);
        for _ in 0..5 {
            sgd_update(&mut theta, &t(&[0.0]), &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert_eq!(theta, t(&[3.0]));
    }

    #[test]
    fn schedule_multiplies_from_milestones() {
        let s = OptimizerState::new(0.01, 0.9, 0.0, vec![(10, 0.1), (20, 0.5)]);
        assert_eq!(s.rate_at(0), 0.01);
        assert!((s.rate_at(10) - 0.001).abs() < 1e-18);
        assert!((s.rate_at(25) - 0.0005).abs() < 1e-18);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut theta = t(&[1.0]);
        let mut v = Tensor::zeros([1]);
        assert!(sgd_update(&mut theta, &t(&[1.0, 2.0]), &mut v, 0.1, 0.0, 0.0).is_err());
    }
}
