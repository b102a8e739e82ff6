use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), epsilon 1e-8.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("adam hyperparameters {self:?}")))
        }
    }
}

/// Optimizer state: step counter plus first and second moments per parameter.
///
/// Only parameters with `requires_grad` are visited; frozen ones keep zero
/// moments and are never written.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    round_to_f32: bool,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
            round_to_f32: false,
        })
    }

    /// Rounds every updated parameter to the nearest `f32`, so parameters stay
    /// exactly representable in single-precision checkpoints.
    pub fn with_f32_storage(mut self, flag: bool) -> Self {
        self.round_to_f32 = flag;
        self
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are read, never cleared.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer built for {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let t = params.get(id);
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::MissingGrad(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let round = self.round_to_f32;
        for (i, (_, tensor)) in params.iter_mut().enumerate() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let next = *p - lr * m_hat / (v_hat.sqrt() + epsilon);
                *p = if round { next as f32 as f64 } else { next };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Tensor;

    fn store(vals: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(&[vals.len()], vals.to_vec()).unwrap());
        s.get_mut(id).accumulate_grad(grads);
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
        for scale in [1e-3, 1.0, 1e3] {
            let g = [scale, -scale];
            let mut s = store(&[0.0, 0.0], &g);
            let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
            adam.step(&mut s).unwrap();
            let p = s.by_name("p").unwrap().values();
            for (pi, gi) in p.iter().zip(g) {
                let expected = -1e-3 * gi / (gi.abs() + 1e-8);
                assert!((pi - expected).abs() < 1e-15, "{pi} vs {expected}");
                assert!((pi + 1e-3 * gi.signum()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[0.5, -0.25], &[0.0, 0.0]);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("p").unwrap().values(), &[0.5, -0.25]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut s = ParamStore::new();
        s.add("encoder.w", Tensor::zeros(&[2]));
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        assert!(matches!(adam.step(&mut s), Err(Error::MissingGrad(n)) if n == "encoder.w"));
    }

    #[test]
    fn frozen_params_skipped() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[1], vec![1.0]).unwrap());
        s.get_mut(id).set_requires_grad(false);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(id).values(), &[1.0]);
    }

    #[test]
    fn grads_untouched_by_step() {
        let mut s = store(&[1.0], &[0.3]);
        let mut adam = AdamState::new(AdamConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.by_name("p").unwrap().grad().unwrap(), &[0.3]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let s = ParamStore::new();
        assert!(AdamState::new(AdamConfig { beta1: 1.0, ..Default::default() }, &s).is_err());
        assert!(AdamState::new(AdamConfig::with_lr(-1.0), &s).is_err());
    }
}
