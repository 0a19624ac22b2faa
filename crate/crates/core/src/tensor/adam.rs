//! Bias-corrected Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.9, weight_decay: 1e-6, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::config("adam betas must lie in (0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("adam weight_decay must be >= 0 and eps > 0"));
        }
        Ok(())
    }
}

/// Optimizer state: one first/second moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state with zero moments congruent with `params`.
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let zeros: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { config, step_count: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

/// Applies one update in place. `grads[i] = None` marks a frozen parameter,
/// which keeps both its value and its moments untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<Tensor>], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract("adam_step: params, grads and state differ in length"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
                return Err(Error::contract(format!("adam_step: shape mismatch at parameter {i}")));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam_step gradient".into() });
            }
        }
    }
    state.step_count += 1;
    let AdamConfig { beta1, beta2, weight_decay, eps } = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let precision = p.precision();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let upd = m_hat / (v_hat.sqrt() + eps) + weight_decay * pd[j];
            pd[j] = precision.round(pd[j] - lr * upd);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(g: &[f64]) -> (Tensor, Tensor, AdamState) {
        let p = Tensor::new(&[g.len()], vec![1.0; g.len()]).unwrap();
        let gt = Tensor::new(&[g.len()], g.to_vec()).unwrap();
        let s = AdamState::new(AdamConfig { weight_decay: 0.0, ..Default::default() }, [&p]);
        (p, gt, s)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut p, g, mut s) = setup(&[0.3, -2.0, 0.0]);
        adam_step(&mut [&mut p], &[Some(g)], &mut s, 1e-3).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p.data()[1] - (1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(p.data()[2], 1.0);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, g, mut s) = setup(&[0.0, 0.0]);
        let before = p.clone();
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Some(g.clone())], &mut s, 1e-2).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn deterministic() {
        let (mut p1, g, mut s1) = setup(&[0.5, -0.25]);
        let (mut p2, _, mut s2) = setup(&[0.5, -0.25]);
        adam_step(&mut [&mut p1], &[Some(g.clone())], &mut s1, 1e-3).unwrap();
        adam_step(&mut [&mut p2], &[Some(g)], &mut s2, 1e-3).unwrap();
        assert!(p1.bit_eq(&p2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let (mut p, g, mut s) = setup(&[1.0]);
        assert!(matches!(adam_step(&mut [&mut p], &[Some(g)], &mut s, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let (mut p, _, mut s) = setup(&[1.0]);
        let before = p.clone();
        adam_step(&mut [&mut p], &[None], &mut s, 1e-3).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn second_moment_nonnegative() {
        let (mut p, g, mut s) = setup(&[-3.0, 2.0]);
        adam_step(&mut [&mut p], &[Some(g)], &mut s, 1e-3).unwrap();
        assert!(s.second_moment[0].data().iter().all(|&v| v >= 0.0));
    }
}
