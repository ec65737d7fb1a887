use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update of every `(name, parameter, gradient)` triple.
    ///
    /// All gradients are checked before anything is touched: a non-finite
    /// entry aborts the step and leaves parameters, moments and the step
    /// counter as they were.
    pub fn step<'a, I>(&mut self, updates: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<S>, &'a Tensor<S>)>,
    {
        let updates: Vec<_> = updates.into_iter().collect();
        for (name, param, grad) in &updates {
            if param.shape() != grad.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let lr = S::of(c.learning_rate);
        let eps = S::of(c.epsilon);
        for (name, param, grad) in updates {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(grad.shape().to_vec()), Tensor::zeros(grad.shape().to_vec())));
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (S::one() - b1) * g;
                *v = b2 * *v + (S::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            learning_rate: lr,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_closed_form() {
        let mut adam = AdamState::<f64>::new(cfg(0.1));
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        adam.step([("p", &mut p, &g)]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - expected).abs() < 1e-15, "{}", p.item());
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut adam = AdamState::<f64>::new(cfg(0.1));
        let mut p = Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        adam.step([("p", &mut p, &g)]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn parameters_update_independently() {
        let mut joint = AdamState::<f64>::new(cfg(0.01));
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let (ga, gb) = (Tensor::scalar(0.3), Tensor::scalar(-4.0));
        joint.step([("a", &mut a, &ga), ("b", &mut b, &gb)]).unwrap();

        let mut solo = AdamState::<f64>::new(cfg(0.01));
        let mut a2 = Tensor::scalar(1.0);
        solo.step([("a", &mut a2, &ga)]).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut adam = AdamState::<f64>::new(cfg(0.1));
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let err = adam.step([("blocks.0.w", &mut p, &g)]).unwrap_err();
        assert!(err.to_string().contains("blocks.0.w"));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn second_moment_stays_non_negative() {
        let mut adam = AdamState::<f64>::new(cfg(0.01));
        let mut p = Tensor::from_f64([2], &[0.0, 0.0]).unwrap();
        for i in 0..10 {
            let g = Tensor::from_f64([2], &[(i as f64).sin(), -(i as f64)]).unwrap();
            adam.step([("p", &mut p, &g)]).unwrap();
        }
        assert!(adam.moments["p"].1.data().iter().all(|&v| v >= 0.0));
    }
}
