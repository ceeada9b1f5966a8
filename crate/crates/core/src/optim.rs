//! SGD with Nesterov momentum, coupled L2 weight decay on the weights, and a
//! step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, TransformModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_factor: 10.0,
            decay_every_epochs: 4,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return bad(format!(
                "decay_factor must be positive, got {}",
                self.decay_factor
            ));
        }
        if self.decay_every_epochs == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("decay_every_epochs, epochs and batch_size must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 * decay_factor^(-floor(epoch / decay_every_epochs))` for a 0-based epoch.
pub fn learning_rate(cfg: &OptimizerConfig, epoch: usize) -> f64 {
    let drops = (epoch / cfg.decay_every_epochs) as i32;
    // Dividing by an exact power keeps 0.01 / 10 == 0.001 exact in f64,
    // where multiplying by 10^-k would not.
    cfg.lr0 / cfg.decay_factor.powi(drops)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity_weights: Vec<f64>,
    pub velocity_bias: Vec<f64>,
    pub step_count: u64,
    pub epoch: usize,
}

impl OptimizerState {
    pub fn new(model: &TransformModel) -> Self {
        Self {
            velocity_weights: vec![0.0; model.weights().len()],
            velocity_bias: vec![0.0; model.bias().len()],
            step_count: 0,
            epoch: 0,
        }
    }
}

fn nesterov_update(
    params: &mut [f64],
    velocity: &mut [f64],
    grads: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((theta, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        let g = g + weight_decay * *theta;
        *v = momentum * *v + g;
        *theta -= lr * (g + momentum * *v);
    }
}

/// One optimizer step at the learning rate of `epoch`. Weight decay applies
/// to `W` only.
pub fn step(
    model: &mut TransformModel,
    state: &mut OptimizerState,
    grads: &GradientSet,
    cfg: &OptimizerConfig,
    epoch: usize,
) -> Result<()> {
    let (n_w, n_b) = (model.weights().len(), model.bias().len());
    if grads.d_weights.len() != n_w
        || grads.d_bias.len() != n_b
        || state.velocity_weights.len() != n_w
        || state.velocity_bias.len() != n_b
    {
        return Err(Error::ShapeMismatch(
            "gradients or optimizer state do not match the model".into(),
        ));
    }
    let lr = learning_rate(cfg, epoch);
    let (weights, bias) = model.params_mut();
    nesterov_update(
        weights,
        &mut state.velocity_weights,
        &grads.d_weights,
        lr,
        cfg.momentum,
        cfg.weight_decay,
    );
    nesterov_update(
        bias,
        &mut state.velocity_bias,
        &grads.d_bias,
        lr,
        cfg.momentum,
        0.0,
    );
    state.step_count += 1;
    state.epoch = epoch;
    if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after optimizer step".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr0: f64, momentum: f64, weight_decay: f64) -> OptimizerConfig {
        OptimizerConfig {
            lr0,
            momentum,
            weight_decay,
            decay_every_epochs: 1000,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn default_schedule_values() {
        let c = OptimizerConfig::default();
        assert_eq!(learning_rate(&c, 0), 0.01);
        assert_eq!(learning_rate(&c, 3), 0.01);
        assert_eq!(learning_rate(&c, 4), 0.001);
        assert_eq!(learning_rate(&c, 19), 1e-6);
    }

    #[test]
    fn schedule_is_non_increasing_with_expected_plateaus() {
        let c = OptimizerConfig::default();
        let lrs: Vec<f64> = (0..c.epochs).map(|e| learning_rate(&c, e)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        let mut plateaus = lrs.clone();
        plateaus.dedup();
        assert_eq!(plateaus.len(), c.epochs.div_ceil(c.decay_every_epochs));
    }

    #[test]
    fn plain_sgd_when_momentum_and_decay_are_zero() {
        let mut m = TransformModel::new(2, 1, vec![0.5, -1.5], vec![0.25, 2.0]).unwrap();
        let before = m.clone();
        let mut s = OptimizerState::new(&m);
        let g = GradientSet {
            d_weights: vec![0.3, -0.7],
            d_bias: vec![1.1, 0.0],
        };
        let c = cfg(0.05, 0.0, 0.0);
        step(&mut m, &mut s, &g, &c, 0).unwrap();
        for k in 0..2 {
            assert_eq!(m.weights()[k], before.weights()[k] - 0.05 * g.d_weights[k]);
            assert_eq!(m.bias()[k], before.bias()[k] - 0.05 * g.d_bias[k]);
        }
    }

    #[test]
    fn zero_gradient_and_velocity_is_a_fixed_point() {
        let mut m = TransformModel::new(2, 1, vec![0.5, -1.5], vec![0.25, 2.0]).unwrap();
        let before = m.clone();
        let mut s = OptimizerState::new(&m);
        let g = GradientSet::zeros_like(&m);
        step(&mut m, &mut s, &g, &cfg(0.1, 0.9, 0.0), 0).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn nesterov_two_step_trace_on_quadratic() {
        // f(theta) = |theta|^2 / 2, so g = theta. Hand trace with lr 0.1, mu 0.9:
        //   step 1: v = 1,    theta = 1 - 0.1 * (1 + 0.9)          = 0.81
        //   step 2: v = 1.71, theta = 0.81 - 0.1 * (0.81 + 1.539)  = 0.5751
        let mut m = TransformModel::new(1, 1, vec![1.0], vec![1.0]).unwrap();
        let mut s = OptimizerState::new(&m);
        let c = cfg(0.1, 0.9, 0.0);
        let expected = [(0.81, 1.0), (0.5751, 1.71)];
        for (theta, v) in expected {
            let g = GradientSet {
                d_weights: m.weights().to_vec(),
                d_bias: m.bias().to_vec(),
            };
            step(&mut m, &mut s, &g, &c, 0).unwrap();
            assert!((m.weights()[0] - theta).abs() < 1e-12);
            assert!((m.bias()[0] - theta).abs() < 1e-12);
            assert!((s.velocity_weights[0] - v).abs() < 1e-12);
        }
        assert_eq!(s.step_count, 2);
    }

    #[test]
    fn weight_decay_skips_bias() {
        let mut m = TransformModel::new(2, 1, vec![1.0, -2.0], vec![3.0, -4.0]).unwrap();
        let mut s = OptimizerState::new(&m);
        let g = GradientSet::zeros_like(&m);
        let c = cfg(0.1, 0.9, 0.5);
        for _ in 0..5 {
            step(&mut m, &mut s, &g, &c, 0).unwrap();
        }
        assert_eq!(m.bias(), &[3.0, -4.0]);
        assert!(m.weights()[0].abs() < 1.0 && m.weights()[1].abs() < 2.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut m = TransformModel::zeros(2, 2).unwrap();
        let mut s = OptimizerState::new(&m);
        let g = GradientSet {
            d_weights: vec![0.0; 3],
            d_bias: vec![0.0; 2],
        };
        assert!(step(&mut m, &mut s, &g, &OptimizerConfig::default(), 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            batch_size: 0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
