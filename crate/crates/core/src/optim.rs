//! Adam and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

/// One bias-corrected Adam update of `param` in place. `step` is the
/// 1-based index of this update.
pub fn adam_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    cfg: &AdamConfig,
    lr: f64,
) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
    let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
    let (tc1, tc2) = (T::from_f64(c1), T::from_f64(c2));
    let (teps, tlr) = (T::from_f64(cfg.epsilon), T::from_f64(lr));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = tb1 * m[i] + ob1 * g;
        v[i] = tb2 * v[i] + ob2 * g * g;
        let mhat = m[i] / tc1;
        let vhat = v[i] / tc2;
        param[i] -= tlr * mhat / (vhat.sqrt() + teps);
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamConfig) -> Self {
        let zeros = || -> Vec<Vec<T>> { params.params().map(|(_, t)| vec![T::zero(); t.numel()]).collect() };
        Self {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
        }
    }

    /// Applies one update with learning rate `lr` using the gradients stored
    /// on `params` (missing gradients count as zero). Nothing is modified if
    /// any gradient is non-finite.
    pub fn step(&mut self, params: &ParamSet<T>, lr: f64) -> Result<()> {
        if self.first_moment.len() != params.params().count() {
            return Err(Error::Contract("Adam state does not match parameter set".into()));
        }
        for (name, t) in params.params() {
            if let Some(g) = t.grad_ref().as_ref() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence { name: name.to_string() });
                }
            }
        }
        self.step_count += 1;
        for (i, (_, t)) in params.params().enumerate() {
            let grad = t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()]);
            let mut data = t.data_mut();
            adam_update(
                &mut data,
                &grad,
                &mut self.first_moment[i],
                &mut self.second_moment[i],
                self.step_count,
                &self.config,
                lr,
            );
        }
        Ok(())
    }
}

/// Learning rate divided by 10 at each milestone fraction of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    pub total_steps: u64,
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl StepDecay {
    pub fn new(base_lr: f64, total_steps: u64) -> Self {
        Self {
            base_lr,
            total_steps,
            milestones: vec![0.6, 0.75, 0.9],
            factor: 10.0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step as f64 >= m * self.total_steps as f64)
            .count();
        self.base_lr / self.factor.powi(passed as i32)
    }
}
