//! Optimizers, learning-rate schedules and the coupled ℓ2 term.
//!
//! ℓ2 regularization is applied as a gradient-additive term `λ·w`
//! (equivalent to adding ½λ‖w‖² to the loss); it covers every parameter
//! unless its name starts with an entry of the exclusion list.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{GradSet, ParamSet};
use crate::scalar::{fl, Scalar};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch for {name}: param {param} vs grad {grad}")]
    ShapeMismatch { name: String, param: usize, grad: usize },
    #[error("invalid policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Cosine {
        #[serde(default)]
        lr_min: f64,
    },
    Multistep {
        milestones: Vec<usize>,
        factor: f64,
    },
    Constant,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// The learning policy reused by every retraining round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPolicy {
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
    /// ℓ2 weight λ.
    pub lambda: f64,
    /// Parameter-name prefixes excluded from ℓ2 decay (empty by default).
    #[serde(default)]
    pub decay_exclude: Vec<String>,
    /// Optional override for the training shuffle stream; the harness derives
    /// one from the experiment seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TrainPolicy {
    pub fn validate(&self) -> Result<(), OptimError> {
        if self.lambda < 0.0 {
            return Err(OptimError::Policy(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs < 1 {
            return Err(OptimError::Policy("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(OptimError::Policy("batch_size must be >= 1".into()));
        }
        if let Schedule::Multistep { milestones, factor } = &self.schedule {
            if !milestones.windows(2).all(|w| w[0] < w[1]) {
                return Err(OptimError::Schedule("milestones must be strictly increasing".into()));
            }
            if *factor <= 0.0 {
                return Err(OptimError::Schedule("factor must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max−lr_min)(1+cos(πt/T))`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, OptimError> {
    if total == 0 {
        return Err(OptimError::Schedule("cosine schedule needs total steps > 0".into()));
    }
    debug_assert!(t <= total);
    let progress = t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `lr0 · factor^(milestones passed)`.
pub fn multistep_lr(epoch: usize, milestones: &[usize], factor: f64, lr0: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    lr0 * factor.powi(passed as i32)
}

/// SGD with momentum: `g' = grad + λ·w; v' = β·v + g'; w' = w − lr·v'`.
pub fn sgd_momentum_step<E: Scalar>(
    param: &mut [E],
    grad: &[E],
    velocity: &mut [E],
    lr: f64,
    beta: f64,
    lambda: f64,
) {
    debug_assert_eq!(param.len(), grad.len());
    debug_assert_eq!(param.len(), velocity.len());
    let (lr, beta, lambda) = (fl::<E>(lr), fl::<E>(beta), fl::<E>(lambda));
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g + lambda * *w;
        *v = beta * *v + g;
        *w = *w - lr * *v;
    }
}

/// Bias-corrected Adam on `g' = grad + λ·w`. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<E: Scalar>(
    param: &mut [E],
    grad: &[E],
    m: &mut [E],
    v: &mut [E],
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lambda: f64,
) {
    debug_assert!(t >= 1);
    debug_assert_eq!(param.len(), grad.len());
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let (b1, b2) = (fl::<E>(beta1), fl::<E>(beta2));
    let (bc1, bc2) = (fl::<E>(bc1), fl::<E>(bc2));
    let (lr, eps, lambda) = (fl::<E>(lr), fl::<E>(eps), fl::<E>(lambda));
    let one = E::one();
    for (((w, &g), mi), vi) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + lambda * *w;
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Per-parameter optimizer state for one training round.
///
/// State is created fresh at the start of each round (retraining restarts the
/// original policy, state included).
pub struct Optimizer<E: Scalar> {
    kind: OptimizerKind,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    velocity: BTreeMap<String, Vec<E>>,
    m: BTreeMap<String, Vec<E>>,
    v: BTreeMap<String, Vec<E>>,
    t: usize,
}

impl<E: Scalar> Optimizer<E> {
    pub fn new(policy: &TrainPolicy) -> Self {
        Self {
            kind: policy.optimizer,
            momentum: policy.momentum,
            beta1: policy.adam_beta1,
            beta2: policy.adam_beta2,
            eps: policy.adam_eps,
            velocity: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One optimizer step over all named parameters with gradients.
    pub fn step(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &GradSet<E>,
        lr: f64,
        lambda: f64,
        decay_exclude: &[String],
    ) -> Result<(), OptimError> {
        self.t += 1;
        for (name, grad) in grads {
            let tensor = params
                .get_mut(name)
                .ok_or_else(|| OptimError::Policy(format!("gradient for unknown parameter {name}")))?;
            if tensor.numel() != grad.len() {
                return Err(OptimError::ShapeMismatch {
                    name: name.clone(),
                    param: tensor.numel(),
                    grad: grad.len(),
                });
            }
            let lam = if decay_exclude.iter().any(|p| name.starts_with(p)) { 0.0 } else { lambda };
            let n = tensor.numel();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
                    sgd_momentum_step(tensor.data_mut(), grad, vel, lr, self.momentum, lam);
                }
                OptimizerKind::Adam => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![E::zero(); n]);
                    adam_step(
                        tensor.data_mut(),
                        grad,
                        m,
                        v,
                        self.t,
                        lr,
                        self.beta1,
                        self.beta2,
                        self.eps,
                        lam,
                    );
                }
            }
        }
        Ok(())
    }

    /// Zero the moment/velocity entries at masked-out coordinates.
    pub fn zero_masked(&mut self, name: &str, mask: &[u8]) {
        for store in [&mut self.velocity, &mut self.m, &mut self.v] {
            if let Some(buf) = store.get_mut(name) {
                for (x, &keep) in buf.iter_mut().zip(mask) {
                    if keep == 0 {
                        *x = E::zero();
                    }
                }
            }
        }
    }
}

/// Learning rate for a given step/epoch position under a policy.
pub fn lr_at(policy: &TrainPolicy, step: usize, total_steps: usize, epoch: usize) -> Result<f64, OptimError> {
    match &policy.schedule {
        Schedule::Cosine { lr_min } => cosine_lr(step, total_steps, policy.base_lr, *lr_min),
        Schedule::Multistep { milestones, factor } => {
            Ok(multistep_lr(epoch, milestones, *factor, policy.base_lr))
        }
        Schedule::Constant => Ok(policy.base_lr),
    }
}
