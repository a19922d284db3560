use ndarray::{Array1, ArrayView1};
use rand::Rng;

use super::{outer, Dense, EnhanceError, EnhancedPair, NamedTensor, Result};

/// Independent projections: `e_t = W_t t + b_t`, `e_c = W_c c + b_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayers {
    pub task: Dense,
    pub code: Dense,
}

impl LinearLayers {
    pub fn init<R: Rng>(input_dim: usize, shared_dim: usize, rng: &mut R) -> Self {
        let task = Dense::init(shared_dim, input_dim, rng);
        let code = Dense::init(shared_dim, input_dim, rng);
        LinearLayers { task, code }
    }

    pub(super) fn tensors<'a>(&'a self, out: &mut Vec<NamedTensor<'a>>) {
        self.task.tensors("task", out);
        self.code.tensors("code", out);
    }

    pub(super) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.task.tensors_mut(out);
        self.code.tensors_mut(out);
    }

    pub(super) fn backward(
        &self,
        task_pooled: ArrayView1<f64>,
        code_pooled: ArrayView1<f64>,
        d_task: ArrayView1<f64>,
        d_code: ArrayView1<f64>,
    ) -> Result<(LinearLayers, Array1<f64>, Array1<f64>)> {
        let grads = LinearLayers {
            task: Dense::from_grads(outer(d_task, task_pooled), d_task.to_owned()),
            code: Dense::from_grads(outer(d_code, code_pooled), d_code.to_owned()),
        };
        let d_task_in = self.task.weight.t().dot(&d_task);
        let d_code_in = self.code.weight.t().dot(&d_code);
        Ok((grads, d_task_in, d_code_in))
    }
}

pub fn enhance_linear(
    params: &LinearLayers,
    task_pooled: ArrayView1<f64>,
    code_pooled: ArrayView1<f64>,
) -> Result<EnhancedPair> {
    for (what, dense, x) in [
        ("task input", &params.task, &task_pooled),
        ("code input", &params.code, &code_pooled),
    ] {
        if x.len() != dense.in_dim() {
            return Err(EnhanceError::DimensionMismatch {
                what,
                expected: dense.in_dim(),
                got: x.len(),
            });
        }
    }
    Ok(EnhancedPair {
        task: params.task.apply(task_pooled),
        code: params.code.apply(code_pooled),
    })
}
