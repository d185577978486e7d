//! Optimizers and the learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StepError};
use crate::nn::{Gradients, ModelGraph, ParamId};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Const,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < 0.0 {
            return Err(StepError::Config(format!("learning rate {} must be >= 0", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(StepError::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr0: 0.1,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

/// Epoch-granular learning rate:
/// cosine annealing is `lr0 * 0.5 * (1 + cos(pi * epoch / total))`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    match cfg.schedule {
        Schedule::Const => cfg.lr0,
        Schedule::Cosine => {
            let total = cfg.epochs.max(1) as f64;
            cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total).cos())
        }
    }
}

/// SGD or Adam over the model's trainable parameters. Adam keeps its moment
/// buffers keyed by parameter identity; the step counter is global.
#[derive(Debug)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    steps: u64,
    first_moment: BTreeMap<ParamId, Vec<F>>,
    second_moment: BTreeMap<ParamId, Vec<F>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<F: Scalar> Optimizer<F> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, steps: 0, first_moment: BTreeMap::new(), second_moment: BTreeMap::new() }
    }

    pub fn step(&mut self, model: &mut ModelGraph<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.steps += 1;
        let lr = F::from_f64_c(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, grad) in grads.iter() {
                    let param = model
                        .param_mut(id)
                        .ok_or_else(|| StepError::ShapeMismatch(format!("unknown parameter {id}")))?;
                    if param.len() != grad.len() {
                        return Err(StepError::ShapeMismatch(format!("gradient length for {id}")));
                    }
                    for (w, &g) in param.iter_mut().zip(grad) {
                        *w = *w - lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let beta1 = F::from_f64_c(ADAM_BETA1);
                let beta2 = F::from_f64_c(ADAM_BETA2);
                let eps = F::from_f64_c(ADAM_EPS);
                let bias1 = F::one() - F::from_f64_c(ADAM_BETA1.powi(self.steps as i32));
                let bias2 = F::one() - F::from_f64_c(ADAM_BETA2.powi(self.steps as i32));
                for (id, grad) in grads.iter() {
                    let m = self.first_moment.entry(id).or_insert_with(|| vec![F::zero(); grad.len()]);
                    let v = self.second_moment.entry(id).or_insert_with(|| vec![F::zero(); grad.len()]);
                    let param = model
                        .param_mut(id)
                        .ok_or_else(|| StepError::ShapeMismatch(format!("unknown parameter {id}")))?;
                    if param.len() != grad.len() {
                        return Err(StepError::ShapeMismatch(format!("gradient length for {id}")));
                    }
                    for i in 0..grad.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (F::one() - beta1) * g;
                        v[i] = beta2 * v[i] + (F::one() - beta2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        model.apply_constraints();
        Ok(())
    }
}
