//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use match_core::datamodel::LabelKind;
use match_core::encoders::EmbeddingOutput;
use match_core::enhancement::{EnhancementConfig, EnhancementParameters, Variant};
use match_core::objectives::{self, LossConfig};
use match_core::rng::{substream, StreamRng};
use match_core::scoring;
use ndarray::Array2;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients whose magnitudes are both below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One randomly drawn gradient-check case.
pub struct GradCase {
    pub params: EnhancementParameters,
    pub task: Array2<f64>,
    pub code: Array2<f64>,
    pub kind: LabelKind,
    pub label: f64,
    pub scale: Option<f64>,
    pub loss: LossConfig,
    /// Seed for the dropout stream; `None` evaluates in eval mode.
    pub dropout_seed: Option<u64>,
}

fn seq(rows: usize, cols: usize, rng: &mut StreamRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn tokens(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

impl GradCase {
    /// Draws parameters with every tensor (biases and norm gains included)
    /// perturbed away from its initial value so all paths carry gradient.
    pub fn draw(variant: Variant, kind: LabelKind, seed: u64, training: bool) -> Self {
        let mut rng = substream(seed, "gradcase", 0);
        let cfg = EnhancementConfig {
            variant,
            shared_dim: 4,
            heads: 2,
            dropout_rate: 0.2,
        };
        let mut params = EnhancementParameters::init(&cfg, 4, &mut substream(seed, "init", 0)).unwrap();
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        let lt = rng.random_range(1..=3);
        let lc = rng.random_range(1..=3);
        let task = seq(lt, 4, &mut rng);
        let code = seq(lc, 4, &mut rng);
        let (label, scale) = match kind {
            LabelKind::Binary => (f64::from(u8::from(rng.random_bool(0.5))), None),
            LabelKind::Continuous => (rng.random_range(0.0..=4.0), Some(4.0)),
        };
        let loss = LossConfig {
            margin: rng.random_range(-1.0..=1.0),
            ..LossConfig::default()
        };
        GradCase {
            params,
            task,
            code,
            kind,
            label,
            scale,
            loss,
            dropout_seed: training.then_some(seed),
        }
    }

    fn outputs(&self, task: &Array2<f64>, code: &Array2<f64>) -> (EmbeddingOutput, EmbeddingOutput) {
        (
            EmbeddingOutput::from_rows(tokens(task.nrows()), task.clone()).unwrap(),
            EmbeddingOutput::from_rows(tokens(code.nrows()), code.clone()).unwrap(),
        )
    }

    pub fn score_with(&self, params: &EnhancementParameters, task: &Array2<f64>, code: &Array2<f64>) -> f64 {
        let (t, c) = self.outputs(task, code);
        let mut rng = self.dropout_seed.map(|s| substream(s, "dropout", 0));
        let (pair, _) = params.forward(&t, &c, rng.as_mut()).unwrap();
        scoring::cosine(pair.task.view(), pair.code.view()).unwrap()
    }

    pub fn loss_with(&self, params: &EnhancementParameters, task: &Array2<f64>, code: &Array2<f64>) -> f64 {
        let f = self.score_with(params, task, code);
        objectives::pair_loss(self.kind, f, self.label, self.scale, &self.loss).unwrap()
    }

    pub fn score(&self) -> f64 {
        self.score_with(&self.params, &self.task, &self.code)
    }

    /// Distance of the tempered score from the hinge corner, for binary negatives.
    pub fn corner_distance(&self) -> f64 {
        match (self.kind, self.label) {
            (LabelKind::Binary, y) if y == 0.0 => (self.score() - self.loss.margin).abs(),
            _ => f64::INFINITY,
        }
    }

    /// Analytic gradients: per parameter tensor, then task and code inputs.
    pub fn analytic(&self) -> (Vec<Vec<f64>>, Array2<f64>, Array2<f64>) {
        let (t, c) = self.outputs(&self.task, &self.code);
        let mut rng = self.dropout_seed.map(|s| substream(s, "dropout", 0));
        let (pair, trace) = self.params.forward(&t, &c, rng.as_mut()).unwrap();
        let (f, d_et, d_ec) = scoring::cosine_with_grad(pair.task.view(), pair.code.view()).unwrap();
        let dl_df = objectives::loss_gradient(self.kind, f, self.label, self.scale, &self.loss).unwrap();
        let (grads, inputs) = self
            .params
            .backward(&trace, (&d_et * dl_df).view(), (&d_ec * dl_df).view())
            .unwrap();
        let flat = grads.tensors().iter().map(|t| t.data.to_vec()).collect();
        (flat, inputs.task, inputs.code)
    }

    /// Central finite differences over every parameter and input entry.
    pub fn numeric(&self) -> (Vec<Vec<f64>>, Array2<f64>, Array2<f64>) {
        let flat: Vec<Vec<f64>> = self.params.tensors().iter().map(|t| t.data.to_vec()).collect();
        let mut param_grads = Vec::with_capacity(flat.len());
        for ti in 0..flat.len() {
            let mut g = vec![0.0; flat[ti].len()];
            for (j, slot) in g.iter_mut().enumerate() {
                let mut plus = flat.clone();
                plus[ti][j] += FD_STEP;
                let mut minus = flat.clone();
                minus[ti][j] -= FD_STEP;
                let lp = self.loss_with(&self.params.with_tensors(&plus).unwrap(), &self.task, &self.code);
                let lm = self.loss_with(&self.params.with_tensors(&minus).unwrap(), &self.task, &self.code);
                *slot = (lp - lm) / (2.0 * FD_STEP);
            }
            param_grads.push(g);
        }
        let input_fd = |which_task: bool| {
            let base = if which_task { &self.task } else { &self.code };
            let mut g = Array2::zeros(base.raw_dim());
            for idx in 0..base.len() {
                let (r, col) = (idx / base.ncols(), idx % base.ncols());
                let mut plus = base.clone();
                plus[[r, col]] += FD_STEP;
                let mut minus = base.clone();
                minus[[r, col]] -= FD_STEP;
                let (lp, lm) = if which_task {
                    (
                        self.loss_with(&self.params, &plus, &self.code),
                        self.loss_with(&self.params, &minus, &self.code),
                    )
                } else {
                    (
                        self.loss_with(&self.params, &self.task, &plus),
                        self.loss_with(&self.params, &self.task, &minus),
                    )
                };
                g[[r, col]] = (lp - lm) / (2.0 * FD_STEP);
            }
            g
        };
        (param_grads, input_fd(true), input_fd(false))
    }

    /// Largest relative error between analytic and numeric gradients.
    pub fn max_relative_error(&self) -> f64 {
        let (ap, at, ac) = self.analytic();
        let (np, nt, nc) = self.numeric();
        let mut worst: f64 = 0.0;
        for (a, n) in ap.iter().flatten().zip(np.iter().flatten()) {
            worst = worst.max(relative_error(*a, *n));
        }
        for (a, n) in at.iter().zip(nt.iter()).chain(ac.iter().zip(nc.iter())) {
            worst = worst.max(relative_error(*a, *n));
        }
        worst
    }
}

/// Draws `count` cases, skipping binary negatives that sit within `1e-3`
/// of the hinge corner where the loss is not differentiable.
pub fn grad_cases(variant: Variant, kind: LabelKind, count: usize, training: bool) -> Vec<GradCase> {
    let mut out = Vec::with_capacity(count);
    let mut seed = 0u64;
    while out.len() < count {
        let case = GradCase::draw(variant, kind, seed, training);
        seed += 1;
        if case.corner_distance() > 1e-3 {
            out.push(case);
        }
    }
    out
}
