use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Per-parameter velocity buffers, allocated lazily.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One SGD update over `params`, consuming and clearing their gradients.
///
/// `v ← μ·v + g; w ← w − lr·v`. Parameters without a gradient are left
/// untouched.
pub fn sgd_step(params: &mut [&mut Tensor], cfg: &SgdConfig, state: &mut SgdState) {
    if state.velocity.len() < params.len() {
        state.velocity.resize(params.len(), Vec::new());
    }
    for (p, vel) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let Some(g) = p.grad().map(|g| g.to_vec()) else { continue };
        let lr = cfg.learning_rate;
        if cfg.momentum == 0.0 && cfg.weight_decay == 0.0 {
            for (w, gv) in p.data_mut().iter_mut().zip(&g) {
                *w -= lr * gv;
            }
        } else {
            if vel.len() != g.len() {
                *vel = vec![0.0; g.len()];
            }
            let (mu, wd) = (cfg.momentum, cfg.weight_decay);
            for ((w, gv), v) in p.data_mut().iter_mut().zip(&g).zip(vel.iter_mut()) {
                let grad = gv + wd * *w;
                *v = mu * *v + grad;
                *w -= lr * *v;
            }
        }
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn param(w: f32) -> Tensor {
        Tensor::from_vec(vec![w]).with_grad()
    }

    #[test]
    fn plain_step() {
        let mut w = param(1.0);
        w.accumulate_grad(&[2.0]).unwrap();
        let cfg = SgdConfig { learning_rate: 0.1, ..Default::default() };
        sgd_step(&mut [&mut w], &cfg, &mut SgdState::new());
        assert_abs_diff_eq!(w.data()[0], 0.8, epsilon = 1e-7);
        assert!(w.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_weight() {
        let mut w = param(1.5);
        w.accumulate_grad(&[0.0]).unwrap();
        sgd_step(&mut [&mut w], &SgdConfig::default(), &mut SgdState::new());
        assert_eq!(w.data()[0], 1.5);
    }

    #[test]
    fn momentum_velocity() {
        let mut w = param(0.0);
        let cfg = SgdConfig { learning_rate: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut st = SgdState::new();
        w.accumulate_grad(&[1.0]).unwrap();
        sgd_step(&mut [&mut w], &cfg, &mut st);
        assert_abs_diff_eq!(w.data()[0], -0.1, epsilon = 1e-7);
        w.accumulate_grad(&[1.0]).unwrap();
        sgd_step(&mut [&mut w], &cfg, &mut st);
        assert_abs_diff_eq!(w.data()[0], -0.29, epsilon = 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SgdConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
    }
}
