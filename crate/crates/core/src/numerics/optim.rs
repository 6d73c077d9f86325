use serde::{Deserialize, Serialize};

use super::params::{Param, ParamSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient before the moment updates, or
    /// applied as a direct shrink of the weights when `decoupled` is set.
    pub weight_decay: f64,
    #[serde(default)]
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            decoupled: false,
        }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn for_param(p: &Param) -> Self {
        Self {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` from its stored gradient.
pub fn adam_step(param: &mut Param, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if !param.grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    if state.m.shape() != param.value.shape() {
        return Err(Error::dim("adam state does not match parameter"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let value = param.value.data_mut();
    let grad = param.grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    let (coupled, shrink) = if cfg.decoupled {
        (0.0, 1.0 - cfg.lr * cfg.weight_decay)
    } else {
        (cfg.weight_decay, 1.0)
    };
    for i in 0..value.len() {
        let g = grad[i] + coupled * value[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] = shrink * value[i] - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            states: params.iter().map(AdamState::for_param).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (p, s) in params.iter_mut().zip(&mut self.states) {
            adam_step(p, s, &self.config)?;
        }
        params.zero_grad();
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn param(v: f64, g: f64) -> Param {
        let mut p = Param::new(Tensor::vector(vec![v]));
        p.grad = Tensor::vector(vec![g]);
        p
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = param(1.5, 0.0);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p.value.data(), &[1.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_lr_updates_moments_only() {
        let mut p = param(2.0, 0.5);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, &AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(p.value.data(), &[2.0]);
        assert!((s.m.data()[0] - 0.05).abs() < 1e-15);
        assert!((s.v.data()[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn first_step_by_hand() {
        // m = 0.1, v = 0.001; bias correction makes both exactly 1.
        let mut p = param(0.0, 1.0);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, &AdamConfig::default()).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.value.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_without_touching_moments() {
        let mut p = param(2.0, 0.0);
        let mut s = AdamState::for_param(&p);
        let cfg = AdamConfig { lr: 0.01, weight_decay: 0.5, decoupled: true, ..AdamConfig::default() };
        adam_step(&mut p, &mut s, &cfg).unwrap();
        assert_eq!(p.value.data()[0], 2.0 * (1.0 - 0.005));
        assert_eq!(s.m.data()[0], 0.0);

        let mut q = param(2.0, 0.0);
        let mut s = AdamState::for_param(&q);
        adam_step(&mut q, &mut s, &AdamConfig { decoupled: false, ..cfg }).unwrap();
        assert!((s.m.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_finite_grad_is_rejected() {
        let mut p = param(0.0, f64::NAN);
        let mut s = AdamState::for_param(&p);
        assert!(matches!(
            adam_step(&mut p, &mut s, &AdamConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn zero_grad_is_noop_from_fresh_moments(
            v in -10.0f64..10.0,
            lr in 0.0f64..1.0,
            b1 in 0.0f64..0.999,
            b2 in 0.0f64..0.9999,
            t in 0u64..1000,
        ) {
            let mut p = param(v, 0.0);
            let mut s = AdamState::for_param(&p);
            s.t = t;
            let cfg = AdamConfig { lr, beta1: b1, beta2: b2, ..AdamConfig::default() };
            adam_step(&mut p, &mut s, &cfg).unwrap();
            prop_assert_eq!(p.value.data()[0], v);
            prop_assert_eq!(s.t, t + 1);
        }
    }
}
