//! Multi-head cross-attention block with post-attention layer norm, mean
//! pooling over query positions and a final projection.
//!
//! No positional encodings and no residual edge: the block is
//! `proj(mean_rows(norm(out(attend(q, kv)))))`.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use super::{outer, Dense, EnhanceError, EnhancedPair, InputGrads, NamedTensor, Result};
use crate::rng::StreamRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One side of the cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub norm_gain: Array1<f64>,
    pub norm_bias: Array1<f64>,
    pub projection: Dense,
}

/// Intermediates of one block's forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub queries_in: Array2<f64>,
    pub context_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per-head attention probabilities (before dropout), `L_q × L_k`.
    pub probs: Vec<Array2<f64>>,
    /// Per-head dropout multipliers (0 or `1/(1-p)`), when dropout was active.
    pub masks: Option<Vec<Array2<f64>>>,
    /// Concatenated head outputs, before the output projection.
    pub attended: Array2<f64>,
    pub normed: Array2<f64>,
    pub inv_std: Array1<f64>,
    pub pooled: Array1<f64>,
}

/// Task block (task queries over code) and code block (code queries over task).
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionLayers {
    pub heads: usize,
    pub task: AttentionBlock,
    pub code: AttentionBlock,
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

impl AttentionBlock {
    pub fn init<R: Rng>(width: usize, shared_dim: usize, rng: &mut R) -> Self {
        AttentionBlock {
            query: Dense::init(width, width, rng),
            key: Dense::init(width, width, rng),
            value: Dense::init(width, width, rng),
            output: Dense::init(width, width, rng),
            norm_gain: Array1::ones(width),
            norm_bias: Array1::zeros(width),
            projection: Dense::init(shared_dim, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.query.in_dim()
    }

    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.query.tensors(&format!("{prefix}.query"), out);
        self.key.tensors(&format!("{prefix}.key"), out);
        self.value.tensors(&format!("{prefix}.value"), out);
        self.output.tensors(&format!("{prefix}.output"), out);
        for (name, t) in [("gain", &self.norm_gain), ("bias", &self.norm_bias)] {
            out.push(NamedTensor {
                name: format!("{prefix}.norm.{name}"),
                shape: t.shape().to_vec(),
                data: t.as_slice().expect("standard layout"),
            });
        }
        self.projection.tensors(&format!("{prefix}.projection"), out);
    }

    fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.query.tensors_mut(out);
        self.key.tensors_mut(out);
        self.value.tensors_mut(out);
        self.output.tensors_mut(out);
        out.push(self.norm_gain.as_slice_mut().expect("standard layout"));
        out.push(self.norm_bias.as_slice_mut().expect("standard layout"));
        self.projection.tensors_mut(out);
    }

    /// Attends from `queries_in` over `context_in` and returns the projected
    /// pooled vector.
    pub fn forward(
        &self,
        heads: usize,
        queries_in: &Array2<f64>,
        context_in: &Array2<f64>,
        mut dropout: Option<(f64, &mut StreamRng)>,
    ) -> Result<(Array1<f64>, BlockTrace)> {
        let width = self.width();
        if queries_in.nrows() == 0 || context_in.nrows() == 0 {
            return Err(EnhanceError::EmptySequence);
        }
        for (what, m) in [("query sequence", queries_in), ("context sequence", context_in)] {
            if m.ncols() != width {
                return Err(EnhanceError::DimensionMismatch {
                    what,
                    expected: width,
                    got: m.ncols(),
                });
            }
        }
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.apply_rows(queries_in);
        let k = self.key.apply_rows(context_in);
        let v = self.value.apply_rows(context_in);
        let (lq, lk) = (q.nrows(), k.nrows());

        let mut probs = Vec::with_capacity(heads);
        let mut masks = dropout
            .as_ref()
            .filter(|(p, _)| *p > 0.0)
            .map(|_| Vec::with_capacity(heads));
        let mut attended = Array2::zeros((lq, width));
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            let weights = match (&mut masks, &mut dropout) {
                (Some(masks), Some((rate, rng))) => {
                    let keep = 1.0 / (1.0 - *rate);
                    let mask =
                        Array2::from_shape_simple_fn((lq, lk), || if rng.random::<f64>() < *rate { 0.0 } else { keep });
                    let dropped = &scores * &mask;
                    masks.push(mask);
                    dropped
                }
                _ => scores.clone(),
            };
            attended.slice_mut(cols).assign(&weights.dot(&v.slice(cols)));
            probs.push(scores);
        }

        let pre_norm = self.output.apply_rows(&attended);
        let width_f = width as f64;
        let mean = pre_norm.sum_axis(Axis(1)) / width_f;
        let centered = &pre_norm - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|x| x * x).sum_axis(Axis(1)) / width_f;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let normed = &centered * &inv_std.view().insert_axis(Axis(1));
        let out_rows = &normed * &self.norm_gain + &self.norm_bias;
        let pooled = out_rows.mean_axis(Axis(0)).expect("non-empty");
        let out = self.projection.apply(pooled.view());

        Ok((
            out,
            BlockTrace {
                queries_in: queries_in.clone(),
                context_in: context_in.clone(),
                q,
                k,
                v,
                probs,
                masks,
                attended,
                normed,
                inv_std,
                pooled,
            },
        ))
    }

    /// Returns parameter gradients and gradients for the query and context
    /// sequences.
    pub fn backward(
        &self,
        heads: usize,
        trace: &BlockTrace,
        d_out: ArrayView1<f64>,
    ) -> Result<(AttentionBlock, Array2<f64>, Array2<f64>)> {
        let width = self.width();
        if trace.q.ncols() != width || trace.probs.len() != heads {
            return Err(EnhanceError::TraceMismatch);
        }
        let head_dim = width / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let lq = trace.q.nrows();

        let projection = Dense::from_grads(outer(d_out, trace.pooled.view()), d_out.to_owned());
        let d_pooled = self.projection.weight.t().dot(&d_out);

        // Mean pooling spreads the gradient evenly over query rows.
        let d_rows_row = &d_pooled / lq as f64;
        let d_rows = d_rows_row
            .view()
            .insert_axis(Axis(0))
            .broadcast((lq, width))
            .expect("broadcastable")
            .to_owned();
        let norm_gain = (&d_rows * &trace.normed).sum_axis(Axis(0));
        let norm_bias = d_rows.sum_axis(Axis(0));

        let d_normed = &d_rows * &self.norm_gain;
        let width_f = width as f64;
        let mean_dn = d_normed.sum_axis(Axis(1)) / width_f;
        let mean_dn_x = (&d_normed * &trace.normed).sum_axis(Axis(1)) / width_f;
        let d_pre = (&d_normed
            - &mean_dn.view().insert_axis(Axis(1))
            - &(&trace.normed * &mean_dn_x.view().insert_axis(Axis(1))))
            * &trace.inv_std.view().insert_axis(Axis(1));

        let output = Dense::from_grads(d_pre.t().dot(&trace.attended), d_pre.sum_axis(Axis(0)));
        let d_attended = d_pre.dot(&self.output.weight);

        let mut d_q = Array2::zeros(trace.q.raw_dim());
        let mut d_k = Array2::zeros(trace.k.raw_dim());
        let mut d_v = Array2::zeros(trace.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let probs = &trace.probs[h];
            let mask = trace.masks.as_ref().map(|m| &m[h]);
            let weights = match mask {
                Some(m) => probs * m,
                None => probs.clone(),
            };
            let d_att_h = d_attended.slice(cols);
            let mut d_weights = d_att_h.dot(&trace.v.slice(cols).t());
            d_v.slice_mut(cols).assign(&weights.t().dot(&d_att_h));
            if let Some(m) = mask {
                d_weights *= m;
            }
            let row_dot = (&d_weights * probs).sum_axis(Axis(1));
            let d_scores = (d_weights - &row_dot.insert_axis(Axis(1))) * probs * scale;
            d_q.slice_mut(cols).assign(&d_scores.dot(&trace.k.slice(cols)));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&trace.q.slice(cols)));
        }

        let query = Dense::from_grads(d_q.t().dot(&trace.queries_in), d_q.sum_axis(Axis(0)));
        let key = Dense::from_grads(d_k.t().dot(&trace.context_in), d_k.sum_axis(Axis(0)));
        let value = Dense::from_grads(d_v.t().dot(&trace.context_in), d_v.sum_axis(Axis(0)));
        let d_queries_in = d_q.dot(&self.query.weight);
        let d_context_in = d_k.dot(&self.key.weight) + d_v.dot(&self.value.weight);

        Ok((
            AttentionBlock {
                query,
                key,
                value,
                output,
                norm_gain,
                norm_bias,
                projection,
            },
            d_queries_in,
            d_context_in,
        ))
    }
}

impl CrossAttentionLayers {
    pub fn init<R: Rng>(width: usize, shared_dim: usize, heads: usize, rng: &mut R) -> Self {
        let task = AttentionBlock::init(width, shared_dim, rng);
        let code = AttentionBlock::init(width, shared_dim, rng);
        CrossAttentionLayers { heads, task, code }
    }

    pub(super) fn tensors<'a>(&'a self, out: &mut Vec<NamedTensor<'a>>) {
        self.task.tensors("task", out);
        self.code.tensors("code", out);
    }

    pub(super) fn tensors_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.task.tensors_mut(out);
        self.code.tensors_mut(out);
    }

    pub fn forward(
        &self,
        task_seq: &Array2<f64>,
        code_seq: &Array2<f64>,
        dropout: Option<(f64, &mut StreamRng)>,
    ) -> Result<(EnhancedPair, BlockTrace, BlockTrace)> {
        let (rate, mut rng) = match dropout {
            Some((rate, rng)) => (rate, Some(rng)),
            None => (0.0, None),
        };
        let (e_t, task_trace) =
            self.task
                .forward(self.heads, task_seq, code_seq, rng.as_deref_mut().map(|r| (rate, r)))?;
        let (e_c, code_trace) = self
            .code
            .forward(self.heads, code_seq, task_seq, rng.map(|r| (rate, r)))?;
        Ok((EnhancedPair { task: e_t, code: e_c }, task_trace, code_trace))
    }

    pub(super) fn backward(
        &self,
        task_trace: &BlockTrace,
        code_trace: &BlockTrace,
        d_task: ArrayView1<f64>,
        d_code: ArrayView1<f64>,
    ) -> Result<(CrossAttentionLayers, InputGrads)> {
        let (task_grads, d_task_q, d_code_ctx) = self.task.backward(self.heads, task_trace, d_task)?;
        let (code_grads, d_code_q, d_task_ctx) = self.code.backward(self.heads, code_trace, d_code)?;
        Ok((
            CrossAttentionLayers {
                heads: self.heads,
                task: task_grads,
                code: code_grads,
            },
            InputGrads {
                task: d_task_q + d_task_ctx,
                code: d_code_q + d_code_ctx,
            },
        ))
    }
}

/// Runs both cross-attention blocks. `dropout` is consulted only when
/// `training` is true.
pub fn enhance_cross_attention(
    params: &CrossAttentionLayers,
    dropout_rate: f64,
    task_seq: &Array2<f64>,
    code_seq: &Array2<f64>,
    training: bool,
    rng: &mut StreamRng,
) -> Result<EnhancedPair> {
    let dropout = training.then_some((dropout_rate, rng));
    params.forward(task_seq, code_seq, dropout).map(|(pair, _, _)| pair)
}
