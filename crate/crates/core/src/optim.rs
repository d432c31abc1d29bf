//! AdamW with decoupled weight decay, plus the training configuration shared
//! by backbone and expert-head training.

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    /// Toy-backbone defaults.
    pub fn backbone() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Expert-token training: lr 5e-4, weight decay 1.0, 5 epochs.
    pub fn expert_head() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            weight_decay: 1.0,
            epochs: 5,
            batch_size: 1,
            ..Self::backbone()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EtrError::config("learning_rate must be finite and >= 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(EtrError::config("weight_decay must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(EtrError::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(EtrError::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(EtrError::config("invalid AdamW moments"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::backbone()
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, n_params: usize) -> Self {
        AdamW {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    /// One update. Decay is applied to the weights before the adaptive step,
    /// `w ← w·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((w, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::backbone()
        };
        let mut opt = AdamW::new(&cfg, 2);
        let mut w = vec![1.0, 1.0];
        opt.step(&mut w, &[2.0, -0.5]);
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::expert_head()
        };
        let mut opt = AdamW::new(&cfg, 3);
        let mut w = vec![0.5, -0.25, 2.0];
        let before = w.clone();
        opt.step(&mut w, &[1.0, 1.0, 1.0]);
        assert_eq!(w, before);
        assert_eq!(opt.steps(), 1);
        assert!(opt.first_moment().iter().all(|&m| m != 0.0));
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 1.0,
            ..TrainConfig::backbone()
        };
        let mut opt = AdamW::new(&cfg, 1);
        let mut w = vec![2.0];
        opt.step(&mut w, &[0.0]);
        // zero gradient: only the decay term acts, pulling toward zero
        assert!((w[0] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_bad_values() {
        let mut cfg = TrainConfig::backbone();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::backbone();
        cfg.learning_rate = f64::NAN;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::expert_head().validate().is_ok());
    }
}
