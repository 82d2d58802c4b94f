//! Adam, plateau learning-rate reduction and early stopping.

use indexmap::IndexMap;

use super::TrainError;
use crate::resnet::Model;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

/// One bias-corrected Adam update of a single tensor. `t` is the 1-based step.
pub fn adam_update(param: &mut [f32], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) -> Result<(), TrainError> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "parameter of {} values with {} gradients",
            param.len(),
            grad.len()
        )));
    }
    let c1 = 1.0 - ADAM_BETA1.powf(t as f64);
    let c2 = 1.0 - ADAM_BETA2.powf(t as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] = (param[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
    }
    Ok(())
}

impl AdamState {
    /// Updates every trainable parameter of `model` that holds a gradient.
    pub fn step(&mut self, model: &mut Model, lr: f64) -> Result<(), TrainError> {
        self.step += 1;
        let t = self.step;
        for (name, p) in model.params_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g: Vec<f64> = grad.iter().map(|&x| x as f64).collect();
            let res = adam_update(p.data_mut(), &g, m, v, t, lr);
            p.grad = Some(grad);
            res?;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once more than `patience`
/// consecutive epochs fail to improve on the best loss by `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            counter: 0,
        }
    }

    /// Feeds one epoch's validation loss and returns the learning rate for
    /// the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter > self.patience {
                self.lr *= self.factor;
                self.counter = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Continue { improved: bool },
    /// Both epochs are 1-based.
    Stop { epoch: usize, best_epoch: usize },
}

/// Stops once more than `patience` consecutive epochs fail to improve on
/// the best validation loss by `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            counter: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn check(&mut self, val_loss: f64) -> EarlyStop {
        self.epoch += 1;
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.counter = 0;
            return EarlyStop::Continue { improved: true };
        }
        self.counter += 1;
        if self.counter > self.patience {
            EarlyStop::Stop {
                epoch: self.epoch,
                best_epoch: self.best_epoch,
            }
        } else {
            EarlyStop::Continue { improved: false }
        }
    }
}
