use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Parameter, Scalar, Tensor};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.01
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: default_weight_decay(),
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, Default)]
pub struct Moments<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
}

/// One bias-corrected AdamW update with decoupled weight decay.
///
/// Frozen parameters are left untouched. `step` counts from 1.
pub fn adamw_step<S: Scalar>(
    param: &mut Parameter<S>,
    grad: &Tensor<S>,
    state: &mut Moments<S>,
    cfg: &AdamWConfig,
    step: u64,
) {
    if !param.trainable {
        return;
    }
    debug_assert!(step >= 1);
    let n = param.tensor.numel();
    if state.m.len() != n {
        state.m = vec![S::zero(); n];
        state.v = vec![S::zero(); n];
    }
    let b1 = S::lit(cfg.beta1);
    let b2 = S::lit(cfg.beta2);
    let bc1 = S::lit(1.0 - cfg.beta1.powi(step as i32));
    let bc2 = S::lit(1.0 - cfg.beta2.powi(step as i32));
    let lr = S::lit(cfg.lr);
    let eps = S::lit(cfg.eps);
    let wd = S::lit(cfg.weight_decay);
    let values = param.tensor.data_mut();
    for i in 0..n {
        let g = grad.data()[i];
        state.m[i] = b1 * state.m[i] + (S::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (S::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * values[i]);
    }
}

/// Outcome of [`AdamW::step`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was modified.
    Rejected,
}

/// Stateful AdamW over named parameters.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that has a gradient.
    ///
    /// Moment state is only ever created for trainable parameters.
    pub fn step<'p>(
        &mut self,
        updates: impl IntoIterator<Item = (&'p mut Parameter<S>, Option<&'p Tensor<S>>)>,
    ) -> StepOutcome
    where
        S: 'p,
    {
        let updates: Vec<_> = updates
            .into_iter()
            .filter_map(|(p, g)| g.filter(|_| p.trainable).map(|g| (p, g)))
            .collect();
        if let Some((p, _)) = updates.iter().find(|(_, g)| !g.is_finite()) {
            log::warn!("non-finite gradient for {}; skipping optimizer step", p.name);
            return StepOutcome::Rejected;
        }
        self.step += 1;
        for (param, grad) in updates {
            let state = self.state.entry(param.name.clone()).or_default();
            adamw_step(param, grad, state, &self.config, self.step);
        }
        StepOutcome::Applied
    }

    /// Names of parameters that carry optimizer state.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }
}
