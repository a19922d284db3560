//! Enhanced-embeddings layer: maps initial task and code embeddings into a
//! shared `d`-dimensional space.
//!
//! Two variants exist. [`LinearLayers`] projects each side's pooled vector
//! independently. [`CrossAttentionLayers`] lets each side attend over the
//! other (task queries over code keys/values for `e_t`, and the reverse for
//! `e_c`), then layer-normalizes, mean-pools over query positions and projects.
//! Both variants carry hand-written backward passes.

mod attention;
mod linear;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingOutput;
use crate::rng::StreamRng;

pub use attention::{enhance_cross_attention, AttentionBlock, BlockTrace, CrossAttentionLayers, LAYER_NORM_EPS};
pub use linear::{enhance_linear, LinearLayers};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnhanceError {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input sequence is empty")]
    EmptySequence,
    #[error("invalid enhancement configuration: {0}")]
    Config(String),
    #[error("trace does not belong to this parameter variant")]
    TraceMismatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = EnhanceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Linear,
    CrossAttention,
}

impl Variant {
    /// Name used in metric labels: `Linear` or `CA`.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Linear => "Linear",
            Variant::CrossAttention => "CA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhancementConfig {
    pub variant: Variant,
    pub shared_dim: usize,
    pub heads: usize,
    pub dropout_rate: f64,
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        EnhancementConfig {
            variant: Variant::Linear,
            shared_dim: 768,
            heads: 8,
            dropout_rate: 0.2,
        }
    }
}

impl EnhancementConfig {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.shared_dim == 0 || input_dim == 0 {
            return Err(EnhanceError::Config("dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EnhanceError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.variant == Variant::CrossAttention && (self.heads == 0 || input_dim % self.heads != 0) {
            return Err(EnhanceError::Config(format!(
                "attention width {input_dim} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Affine map `y = W x + b` with `W` of shape `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-bound..=bound)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Builds a gradient holder, normalising the weight to row-major layout.
    pub(crate) fn from_grads(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Dense {
            weight: weight.as_standard_layout().into_owned(),
            bias,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Applies the map to every row of `x`.
    pub fn apply_rows(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape().to_vec(),
            data: self.weight.as_slice().expect("standard layout"),
        });
        out.push(NamedTensor {
            name: format!("{prefix}.bias"),
            shape: self.bias.shape().to_vec(),
            data: self.bias.as_slice().expect("standard layout"),
        });
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.weight.as_slice_mut().expect("standard layout"));
        out.push(self.bias.as_slice_mut().expect("standard layout"));
    }
}

/// Borrowed view of one parameter tensor, in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layers {
    Linear(LinearLayers),
    CrossAttention(CrossAttentionLayers),
}

/// Trainable weights of the enhancement layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancementParameters {
    pub layers: Layers,
    pub dropout_rate: f64,
}

/// Output of the layer: `e_t` and `e_c`, both of length `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedPair {
    pub task: Array1<f64>,
    pub code: Array1<f64>,
}

/// Intermediates recorded by a forward pass, consumed by [`EnhancementParameters::backward`].
#[derive(Debug, Clone)]
pub enum ForwardTrace {
    Linear {
        task_pooled: Array1<f64>,
        code_pooled: Array1<f64>,
        task_len: usize,
        code_len: usize,
    },
    CrossAttention {
        task: BlockTrace,
        code: BlockTrace,
    },
}

/// Gradients with respect to every token row of both input sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGrads {
    pub task: Array2<f64>,
    pub code: Array2<f64>,
}

impl EnhancementParameters {
    pub fn init(cfg: &EnhancementConfig, input_dim: usize, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate(input_dim)?;
        let layers = match cfg.variant {
            Variant::Linear => Layers::Linear(LinearLayers::init(input_dim, cfg.shared_dim, rng)),
            Variant::CrossAttention => {
                Layers::CrossAttention(CrossAttentionLayers::init(input_dim, cfg.shared_dim, cfg.heads, rng))
            }
        };
        Ok(EnhancementParameters {
            layers,
            dropout_rate: cfg.dropout_rate,
        })
    }

    pub fn variant(&self) -> Variant {
        match self.layers {
            Layers::Linear(_) => Variant::Linear,
            Layers::CrossAttention(_) => Variant::CrossAttention,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers {
            Layers::Linear(l) => l.task.in_dim(),
            Layers::CrossAttention(ca) => ca.task.query.in_dim(),
        }
    }

    pub fn shared_dim(&self) -> usize {
        match &self.layers {
            Layers::Linear(l) => l.task.out_dim(),
            Layers::CrossAttention(ca) => ca.task.projection.out_dim(),
        }
    }

    pub fn heads(&self) -> Option<usize> {
        match &self.layers {
            Layers::Linear(_) => None,
            Layers::CrossAttention(ca) => Some(ca.heads),
        }
    }

    pub fn config(&self) -> EnhancementConfig {
        EnhancementConfig {
            variant: self.variant(),
            shared_dim: self.shared_dim(),
            heads: self.heads().unwrap_or(EnhancementConfig::default().heads),
            dropout_rate: self.dropout_rate,
        }
    }

    /// All parameter tensors in their fixed declaration order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        match &self.layers {
            Layers::Linear(l) => l.tensors(&mut out),
            Layers::CrossAttention(ca) => ca.tensors(&mut out),
        }
        out
    }

    /// Mutable slices in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        match &mut self.layers {
            Layers::Linear(l) => l.tensors_mut(&mut out),
            Layers::CrossAttention(ca) => ca.tensors_mut(&mut out),
        }
        out
    }

    /// Same shapes, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Adds `scale * other` element-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src = other.tensors();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Runs the layer. Dropout on attention probabilities is active only
    /// when `dropout` supplies a generator (training mode).
    pub fn forward(
        &self,
        task: &EmbeddingOutput,
        code: &EmbeddingOutput,
        dropout: Option<&mut StreamRng>,
    ) -> Result<(EnhancedPair, ForwardTrace)> {
        if task.is_empty() || code.is_empty() {
            return Err(EnhanceError::EmptySequence);
        }
        match &self.layers {
            Layers::Linear(l) => {
                let pair = enhance_linear(l, task.pooled.view(), code.pooled.view())?;
                let trace = ForwardTrace::Linear {
                    task_pooled: task.pooled.clone(),
                    code_pooled: code.pooled.clone(),
                    task_len: task.len(),
                    code_len: code.len(),
                };
                Ok((pair, trace))
            }
            Layers::CrossAttention(ca) => {
                let rate = if dropout.is_some() { self.dropout_rate } else { 0.0 };
                let (pair, task_trace, code_trace) =
                    ca.forward(&task.vectors, &code.vectors, dropout.map(|rng| (rate, rng)))?;
                Ok((
                    pair,
                    ForwardTrace::CrossAttention {
                        task: task_trace,
                        code: code_trace,
                    },
                ))
            }
        }
    }

    /// Gradients of a scalar loss given `∂L/∂e_t` and `∂L/∂e_c`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        d_task: ArrayView1<f64>,
        d_code: ArrayView1<f64>,
    ) -> Result<(EnhancementParameters, InputGrads)> {
        let d = self.shared_dim();
        for (what, g) in [("task upstream gradient", &d_task), ("code upstream gradient", &d_code)] {
            if g.len() != d {
                return Err(EnhanceError::DimensionMismatch {
                    what,
                    expected: d,
                    got: g.len(),
                });
            }
        }
        match (&self.layers, trace) {
            (
                Layers::Linear(l),
                ForwardTrace::Linear {
                    task_pooled,
                    code_pooled,
                    task_len,
                    code_len,
                },
            ) => {
                let (grads, d_task_pooled, d_code_pooled) =
                    l.backward(task_pooled.view(), code_pooled.view(), d_task, d_code)?;
                let inputs = InputGrads {
                    task: spread_over_rows(&d_task_pooled, *task_len),
                    code: spread_over_rows(&d_code_pooled, *code_len),
                };
                Ok((
                    EnhancementParameters {
                        layers: Layers::Linear(grads),
                        dropout_rate: self.dropout_rate,
                    },
                    inputs,
                ))
            }
            (Layers::CrossAttention(ca), ForwardTrace::CrossAttention { task, code }) => {
                let (grads, inputs) = ca.backward(task, code, d_task, d_code)?;
                Ok((
                    EnhancementParameters {
                        layers: Layers::CrossAttention(grads),
                        dropout_rate: self.dropout_rate,
                    },
                    inputs,
                ))
            }
            _ => Err(EnhanceError::TraceMismatch),
        }
    }

    /// Rebuilds parameters with the shapes of `self` from flat tensors.
    pub fn with_tensors(&self, data: &[Vec<f64>]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != data.len() {
            return Err(EnhanceError::Config(format!(
                "expected {} tensors, got {}",
                slots.len(),
                data.len()
            )));
        }
        for (slot, values) in slots.into_iter().zip(data) {
            if slot.len() != values.len() {
                return Err(EnhanceError::DimensionMismatch {
                    what: "tensor length",
                    expected: slot.len(),
                    got: values.len(),
                });
            }
            slot.copy_from_slice(values);
        }
        Ok(out)
    }
}

/// Gradient of a mean over `len` rows, broadcast back to each row.
fn spread_over_rows(pooled_grad: &Array1<f64>, len: usize) -> Array2<f64> {
    let row = pooled_grad / len as f64;
    row.insert_axis(Axis(0))
        .broadcast((len, pooled_grad.len()))
        .expect("broadcastable")
        .to_owned()
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = EnhancementConfig {
            variant: Variant::CrossAttention,
            ..EnhancementConfig::default()
        };
        assert!(cfg.validate(768).is_ok());
        assert!(cfg.validate(30).is_err());
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate(768).is_err());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = EnhancementConfig {
            variant: Variant::CrossAttention,
            shared_dim: 16,
            heads: 2,
            dropout_rate: 0.2,
        };
        let a = EnhancementParameters::init(&cfg, 8, &mut crate::rng::substream(5, "init", 0)).unwrap();
        let b = EnhancementParameters::init(&cfg, 8, &mut crate::rng::substream(5, "init", 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
        assert_eq!(a.config(), cfg);
        let names: Vec<String> = a.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names[0], "task.query.weight");
        assert_eq!(names.last().unwrap(), "code.projection.bias");
        assert_eq!(names.len(), 24);
    }

    #[test]
    fn with_tensors_round_trip() {
        let cfg = EnhancementConfig {
            shared_dim: 3,
            ..EnhancementConfig::default()
        };
        let p = EnhancementParameters::init(&cfg, 2, &mut crate::rng::substream(1, "init", 0)).unwrap();
        let flat: Vec<Vec<f64>> = p.tensors().iter().map(|t| t.data.to_vec()).collect();
        assert_eq!(p.with_tensors(&flat).unwrap(), p);
        assert!(p.with_tensors(&flat[1..]).is_err());
    }

    #[test]
    fn bias_starts_at_zero() {
        let p = EnhancementParameters::init(
            &EnhancementConfig::default(),
            32,
            &mut crate::rng::substream(0, "init", 0),
        )
        .unwrap();
        let tensors = p.tensors();
        let bias = tensors.iter().find(|t| t.name == "task.bias").unwrap();
        assert!(bias.data.iter().all(|v| *v == 0.0));
        let weight = tensors.iter().find(|t| t.name == "task.weight").unwrap();
        let bound = 1.0 / 32f64.sqrt();
        assert!(weight.data.iter().all(|v| v.abs() <= bound));
        assert_eq!(weight.shape, [768, 32]);
    }
}
