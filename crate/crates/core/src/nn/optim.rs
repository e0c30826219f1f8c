use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with lazily updated per-parameter state.
///
/// Only parameters touched since the last step move; untouched parameters
/// keep both their values and their moment estimates bit-for-bit. Adam bias
/// correction uses each parameter's own update count.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    updates: Vec<u64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            updates: Vec::new(),
        })
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::default(), lr)
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn ensure_state(&mut self, store: &ParamStore) {
        while self.first.len() < store.len() {
            let n = store.value(super::ParamId(self.first.len())).len();
            self.first.push(vec![0.0; n]);
            self.second.push(vec![0.0; n]);
            self.updates.push(0);
        }
    }

    /// Applies one update to every touched parameter, then zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.ensure_state(store);
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if !store.is_touched(id) {
                continue;
            }
            if let Some(pos) = store.grad(id).as_slice().iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter `{}` at index {pos}",
                    store.path(id)
                )));
            }
        }
        for id in ids {
            if !store.is_touched(id) {
                continue;
            }
            let k = id.0;
            let nonneg = store.is_nonneg(id);
            let grad = store.grad(id).as_slice().to_vec();
            let value = store.value_mut(id).as_mut_slice();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, g) in value.iter_mut().zip(&grad) {
                        *v -= self.lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    self.updates[k] += 1;
                    let t = self.updates[k] as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = &mut self.first[k];
                    let s = &mut self.second[k];
                    for i in 0..value.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        s[i] = beta2 * s[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / c1;
                        let shat = s[i] / c2;
                        value[i] -= self.lr * mhat / (shat.sqrt() + eps);
                    }
                }
            }
            if nonneg {
                value.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        store.zero_grads();
        self.step += 1;
        Ok(())
    }
}
