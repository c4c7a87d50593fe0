//! First-order optimizers over the `grad` buffers of a [`ParamSet`].
//! Updated values are rounded back to 32-bit storage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::param::{ParamSet, Parameter};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// `theta -= lr * grad` for trainable parameters selected by `keep`.
pub fn sgd_step(params: &mut ParamSet, lr: f64, keep: impl Fn(&Parameter) -> bool) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidInput(format!("learning rate {lr} must be >= 0")));
    }
    params.check_finite_grads()?;
    for p in params.iter_mut().filter(|p| p.trainable && keep(p)) {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * g;
        }
        p.value.quantize();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet, keep: impl Fn(&Parameter) -> bool) -> Result<()> {
        params.check_finite_grads()?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params.iter_mut().filter(|p| p.trainable && keep(p)) {
            let n = p.value.numel();
            let (m, v) = self.moments.entry(p.name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (i, (x, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.value.quantize();
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, keep: impl Fn(&Parameter) -> bool) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, *lr, keep),
            Optimizer::Adam(a) => a.step(params, keep),
        }
    }
}
