//! Gradient descent and ADAM.

use serde::{Deserialize, Serialize};

use crate::element::{lit, Element};
use crate::error::{AutodiffError, Result};
use crate::tensor::TensorOf;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Gd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_steps: usize,
    /// Convergence threshold; its meaning is defined by the caller's loop.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_steps: 1000,
            tolerance: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, max_steps: usize) -> Self {
        Self {
            learning_rate,
            max_steps,
            ..Self::default()
        }
    }

    pub fn gd(learning_rate: f64, max_steps: usize) -> Self {
        Self {
            algorithm: Algorithm::Gd,
            learning_rate,
            max_steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(AutodiffError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(AutodiffError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {beta}"
                )));
            }
        }
        if !(self.adam_epsilon >= 0.0) {
            return Err(AutodiffError::InvalidConfig("adam_epsilon must be non-negative".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(AutodiffError::InvalidConfig("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers; empty until the first step.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T = f32> {
    steps: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new() -> Self {
        Self {
            steps: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Applies one update to `params` in place.
pub fn step<T: Element>(
    params: &mut [TensorOf<T>],
    grads: &[TensorOf<T>],
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    step_scaled(params, grads, config, state, None)
}

/// Like [`step`] with an optional learning-rate multiplier per parameter tensor.
pub fn step_scaled<T: Element>(
    params: &mut [TensorOf<T>],
    grads: &[TensorOf<T>],
    config: &OptimizerConfig,
    state: &mut OptimizerState<T>,
    lr_scale: Option<&[f64]>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(AutodiffError::InvalidArgument(format!(
            "{} params but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if let Some(scale) = lr_scale {
        if scale.len() != params.len() {
            return Err(AutodiffError::InvalidArgument(
                "learning-rate scale length differs from parameter count".into(),
            ));
        }
    }
    if state.first_moment.is_empty() && config.algorithm == Algorithm::Adam {
        state.first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        state.second_moment = state.first_moment.clone();
    }
    state.steps += 1;

    match config.algorithm {
        Algorithm::Gd => {
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let lr: T = lit(config.learning_rate * lr_scale.map_or(1.0, |s| s[i]));
                for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w = *w - lr * d;
                }
            }
        }
        Algorithm::Adam => {
            let t = state.steps as i32;
            let (b1, b2) = (config.adam_beta1, config.adam_beta2);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (b1t, b2t, eps): (T, T, T) = (lit(b1), lit(b2), lit(config.adam_epsilon));
            let (one_b1, one_b2): (T, T) = (lit(1.0 - b1), lit(1.0 - b2));
            let (inv_c1, inv_c2): (T, T) = (lit(1.0 / c1), lit(1.0 / c2));
            for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                let lr: T = lit(config.learning_rate * lr_scale.map_or(1.0, |s| s[i]));
                let m = &mut state.first_moment[i];
                let v = &mut state.second_moment[i];
                for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = b1t * *mi + one_b1 * d;
                    *vi = b2t * *vi + one_b2 * d * d;
                    let m_hat = *mi * inv_c1;
                    let v_hat = *vi * inv_c2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(AutodiffError::NonFinite { op: "optimizer step" });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gd_step_example() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        let mut st = OptimizerState::new();
        step(&mut p, &g, &OptimizerConfig::gd(0.1, 1), &mut st).unwrap();
        assert!((p[0].item().unwrap() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0)];
        let mut st = OptimizerState::new();
        step(&mut p, &g, &OptimizerConfig::adam(0.001, 1), &mut st).unwrap();
        let expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item().unwrap() as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        for cfg in [OptimizerConfig::gd(0.5, 1), OptimizerConfig::adam(0.5, 1)] {
            let init = Tensor::from_fn(vec![5], |i| i as f32 - 2.0);
            let mut p = vec![init.clone()];
            let g = vec![Tensor::zeros(vec![5])];
            let mut st = OptimizerState::new();
            for _ in 0..3 {
                step(&mut p, &g, &cfg, &mut st).unwrap();
            }
            assert_eq!(p[0], init);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let g = vec![Tensor::zeros(vec![3])];
        let mut st = OptimizerState::new();
        assert!(step(&mut p, &g, &OptimizerConfig::default(), &mut st).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig { adam_beta1: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_fn(vec![3], |i| i as f32 + 1.0)];
        let mut st = OptimizerState::new();
        let cfg = OptimizerConfig::adam(0.05, 500);
        for _ in 0..cfg.max_steps {
            let g = vec![p[0].map(|x| 2.0 * x)];
            step(&mut p, &g, &cfg, &mut st).unwrap();
        }
        assert!(p[0].data().iter().all(|x| x.abs() < 1e-2), "{:?}", p[0]);
    }
}
