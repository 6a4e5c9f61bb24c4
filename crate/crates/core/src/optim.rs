//! SGD with momentum, weight decay and multi-step learning-rate decay.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// 1-based epochs after which the learning rate is multiplied by `decay_factor`.
    pub step_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        Ok(())
    }

    /// Learning rate in effect once `epoch` (1-based) epochs have finished.
    pub fn lr_after_epoch(&self, epoch: usize) -> f64 {
        let steps = self.step_epochs.iter().filter(|&&s| s <= epoch).count();
        (0..steps).fold(self.learning_rate, |lr, _| lr * self.decay_factor)
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.005, momentum: 0.9, weight_decay: 1e-4, step_epochs: vec![16, 22], decay_factor: 0.1 }
    }
}

/// Optimizer state: current learning rate and one velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: SgdConfig,
    pub learning_rate: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { learning_rate: config.learning_rate, config, velocity: Vec::new() })
    }

    /// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`
    ///
    /// `grads` follows the store's parameter order.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidConfig(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        }
        let (m, wd, lr) = (T::lit(self.config.momentum), T::lit(self.config.weight_decay), T::lit(self.learning_rate));
        for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.velocity) {
            if g.len() != p.numel() || v.len() != p.numel() {
                return Err(Error::InvalidConfig("gradient length does not match parameter".into()));
            }
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }

    /// Applies the schedule at the end of `epoch` (1-based).
    pub fn end_epoch(&mut self, epoch: usize) {
        self.learning_rate = self.config.lr_after_epoch(epoch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn plain_step() {
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg).unwrap();
        let mut p = one_param(0.0);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert_eq!(p.get("p").unwrap().data(), &[-0.1]);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, m, wd) = (0.05, 0.9, 1e-3);
        let cfg = SgdConfig { learning_rate: lr, momentum: m, weight_decay: wd, ..Default::default() };
        let mut opt = OptimizerState::new(cfg).unwrap();
        let mut p = one_param(1.5);
        let (g1, g2) = (0.3, -0.7);
        opt.step(&mut p, &[vec![g1]]).unwrap();
        opt.step(&mut p, &[vec![g2]]).unwrap();
        let v1 = g1 + wd * 1.5;
        let p1 = 1.5 - lr * v1;
        let v2 = m * v1 + g2 + wd * p1;
        let p2 = p1 - lr * v2;
        assert!((p.get("p").unwrap().data()[0] - p2).abs() < 1e-12);
    }

    #[test]
    fn multi_step_schedule() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.lr_after_epoch(15), 0.005);
        assert!((cfg.lr_after_epoch(16) - 5e-4).abs() < 1e-18);
        assert!((cfg.lr_after_epoch(22) - 5e-5).abs() < 1e-18);
        let mut opt = OptimizerState::<f64>::new(cfg).unwrap();
        opt.end_epoch(22);
        assert!((opt.learning_rate - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn validation() {
        let bad = [
            SgdConfig { learning_rate: 0.0, ..Default::default() },
            SgdConfig { momentum: 1.0, ..Default::default() },
            SgdConfig { decay_factor: 0.0, ..Default::default() },
            SgdConfig { weight_decay: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(OptimizerState::<f64>::new(cfg).is_err());
        }
    }
}
