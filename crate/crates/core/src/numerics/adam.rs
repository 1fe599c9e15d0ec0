// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam with bias correction and optional global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm bound applied to all gradients before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param: &Tensor, config: &AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(param.shape()),
            second_moment: Tensor::zeros(param.shape()),
            step_count: 0,
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }
}

/// One bias-corrected Adam update of `param` from its gradient slot.
pub fn adam_step(param: &mut Tensor, state: &mut AdamState) -> Result<()> {
    if state.first_moment.shape() != param.shape() {
        return Err(Error::State(format!(
            "optimizer state shape {:?} does not match parameter {:?}",
            state.first_moment.shape(),
            param.shape()
        )));
    }
    let grad = param
        .grad
        .as_ref()
        .ok_or_else(|| Error::State("parameter has no gradient".into()))?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for i in 0..grad.len() {
        let g = grad[i];
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param.data[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let states = params.iter().map(|p| AdamState::new(p, &config)).collect();
        Self { config, states }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.step_count)
    }

    /// Clips (if configured) and applies one update to every parameter.
    ///
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<f64> {
        if params.len() != self.states.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            )));
        }
        let mut sq = 0.0;
        for p in params.iter() {
            let g = p
                .grad()
                .ok_or_else(|| Error::State("parameter has no gradient".into()))?;
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
        let norm = sq.sqrt();
        if let Some(max) = self.config.clip_norm {
            if norm > max {
                let s = max / norm;
                for p in params.iter_mut() {
                    if let Some(g) = p.grad_mut() {
                        g.iter_mut().for_each(|x| *x *= s);
                    }
                }
            }
        }
        for (p, st) in params.iter_mut().zip(self.states.iter_mut()) {
            adam_step(p, st)?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let mut st = AdamState::new(&p, &AdamConfig::with_lr(0.1));
        p.set_grad(vec![0.0, 0.0]).unwrap();
        adam_step(&mut p, &mut st).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr * g / (|g| + eps) ≈ lr.
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, &AdamConfig::with_lr(0.1));
        p.set_grad(vec![1.0]).unwrap();
        adam_step(&mut p, &mut st).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p, &AdamConfig::default());
        assert!(matches!(adam_step(&mut p, &mut st), Err(Error::State(_))));
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut w = scalar(0.0);
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: None,
                ..AdamConfig::default()
            },
            &[&w],
        );
        for _ in 0..1000 {
            let g = 2.0 * (w.data()[0] - 3.0);
            w.set_grad(vec![g]).unwrap();
            opt.step(&mut [&mut w]).unwrap();
        }
        assert!((w.data()[0] - 3.0).abs() < 1e-3, "w = {}", w.data()[0]);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), &[&a, &b]);
        a.set_grad(vec![30.0]).unwrap();
        b.set_grad(vec![40.0]).unwrap();
        let norm = opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!((norm - 50.0).abs() < 1e-12);
        let ga = a.grad().unwrap()[0];
        let gb = b.grad().unwrap()[0];
        assert!(((ga * ga + gb * gb).sqrt() - 1.0).abs() < 1e-12);
    }
}
