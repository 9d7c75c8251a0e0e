//! First-order optimizers with per-group learning rates and parameter
//! freezing.

use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moment estimation.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Tensor,
    second: Tensor,
}

/// Optimizer state: moments, step counter and group learning rates.
///
/// Only parameters that received a gradient since the previous step are
/// updated; Adam bias correction uses each parameter's own update count.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimKind,
    group_lrs: Vec<f64>,
    moments: Vec<Option<Moments>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimKind, group_lrs: Vec<f64>) -> Self {
        Self {
            kind,
            group_lrs,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn lr(&self, group: usize) -> f64 {
        self.group_lrs[group]
    }

    pub fn set_lr(&mut self, group: usize, lr: f64) {
        self.group_lrs[group] = lr;
    }

    /// Applies one update and zeroes all gradients.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad().is_finite()) {
            return Err(DiffError::NonFiniteGrad {
                name: p.name().to_string(),
            });
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if p.is_frozen() || !p.is_touched() {
                continue;
            }
            let lr = self.group_lrs[p.group()];
            let grad = p.grad().clone();
            match self.kind {
                OptimKind::Sgd => {
                    for (w, g) in p.value_mut().data_mut().iter_mut().zip(grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let m = self.moments[i].get_or_insert_with(|| Moments {
                        first: Tensor::zeros(grad.rows(), grad.cols()),
                        second: Tensor::zeros(grad.rows(), grad.cols()),
                    });
                    let t = (p.updates() + 1) as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let w = p.value_mut().data_mut();
                    let (m1, m2) = (m.first.data_mut(), m.second.data_mut());
                    for k in 0..w.len() {
                        let g = grad.data()[k];
                        m1[k] = beta1 * m1[k] + (1.0 - beta1) * g;
                        m2[k] = beta2 * m2[k] + (1.0 - beta2) * g * g;
                        let mhat = m1[k] / c1;
                        let vhat = m2[k] / c2;
                        w[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            ParamStore::mark_updated(p);
        }
        store.zero_grads();
        self.step += 1;
        Ok(())
    }
}

/// Step-decay schedule: `base * 0.5^(epoch / period)`.
pub fn halving_lr(base: f64, epoch: usize, period: usize) -> f64 {
    if period == 0 {
        return base;
    }
    base * 0.5f64.powi((epoch / period) as i32)
}
