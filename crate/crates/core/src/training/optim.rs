//! First-order optimizers over flat parameter slices, and early stopping.

use serde::{Deserialize, Serialize};

/// Validation loss must drop by more than this to count as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(alias = "adaptive_moment")]
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one group of tensors sharing a learning rate.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                step: 0,
                m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
                v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    /// Applies one update. `params` and `grads` list the group's tensors in a
    /// fixed order matching the shapes given to [`Optimizer::new`].
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count");
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, dx) in p.iter_mut().zip(g) {
                        *x -= lr * dx;
                    }
                }
            }
            Optimizer::Adam { step, m, v } => {
                *step += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*step);
                let c2 = 1.0 - ADAM_BETA2.powi(*step);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    assert_eq!(p.len(), m.len(), "tensor shape changed between steps");
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the loss of `epoch` (1-based); returns whether it improved.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - MIN_IMPROVEMENT || self.best_epoch == 0 {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}
