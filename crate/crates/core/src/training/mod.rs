//! Mini-batch training with validation early stopping, and the repeated
//! split protocol.

mod checkpoint;
mod model;
mod optim;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{make_splits, DataError, Dataset, Partition, SplitPlan, TaskCodePair, DEFAULT_RATIOS};
use crate::encoders::{self, Backend, EmbeddingOutput, Encoder, EncoderError, EncoderSpec, ServiceConfig, ToyEncoder};
use crate::enhancement::{EnhanceError, EnhancementConfig, EnhancementParameters, ForwardTrace};
use crate::objectives::{self, LossConfig, LossError};
use crate::rng::{substream, StreamRng};
use crate::scoring::{self, ScoreError};

pub use checkpoint::{Checkpoint, CheckpointMeta, SplitFingerprint, CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC};
pub use model::{variant_name, MatchModel};
pub use optim::{EarlyStopping, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, MIN_IMPROVEMENT};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("split {split}: non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { split: usize, epoch: usize, batch: usize },
    #[error("split {split}: {partition:?} partition is empty")]
    EmptyPartition { split: usize, partition: Partition },
    #[error("split {split}: test ids received gradients: {ids:?}")]
    Leakage { split: usize, ids: Vec<String> },
    #[error("score is not finite")]
    NonFiniteScore,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Learning rate multiplier for trainable toy encoder tables.
    pub encoder_lr_multiplier: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub enhancement: EnhancementConfig,
    pub task_encoder: EncoderSpec,
    pub code_encoder: EncoderSpec,
    pub service: ServiceConfig,
}

pub const DEFAULT_TOY_DIM: usize = 64;

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 3e-5,
            encoder_lr_multiplier: 100.0,
            max_epochs: 50,
            patience: 3,
            batch_size: 16,
            seed: 0,
            ratios: DEFAULT_RATIOS,
            optimizer: OptimizerKind::Adam,
            loss: LossConfig::default(),
            enhancement: EnhancementConfig::default(),
            task_encoder: EncoderSpec::toy(DEFAULT_TOY_DIM, true),
            code_encoder: EncoderSpec::toy(DEFAULT_TOY_DIM, true),
            service: ServiceConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.learning_rate) || !positive(self.encoder_lr_multiplier) {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "max_epochs, patience and batch_size must be positive".into(),
            ));
        }
        self.loss.validate()?;
        self.task_encoder.validate()?;
        self.code_encoder.validate()?;
        if self.task_encoder.dim != self.code_encoder.dim {
            return Err(TrainError::Config(format!(
                "task encoder width {} differs from code encoder width {}",
                self.task_encoder.dim, self.code_encoder.dim
            )));
        }
        self.enhancement.validate(self.task_encoder.dim)?;
        Ok(())
    }

    pub fn variant_name(&self) -> String {
        variant_name(&self.task_encoder, self.enhancement.variant.label())
    }
}

/// Losses after one epoch; `improved` marks a new best validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub improved: bool,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub split_index: usize,
    pub split_seed: u64,
    pub variant_name: String,
    pub test_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Ids whose loss contributed a gradient during training.
    #[serde(skip)]
    pub gradient_ids: BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub checkpoint: Checkpoint,
    pub result: ExperimentResult,
}

type EmbeddingMap = HashMap<String, EmbeddingOutput>;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Task,
    Code,
}

impl Side {
    fn text(self, pair: &TaskCodePair) -> &str {
        match self {
            Side::Task => &pair.task,
            Side::Code => &pair.code,
        }
    }

    fn spec(self, cfg: &TrainingConfig) -> &EncoderSpec {
        match self {
            Side::Task => &cfg.task_encoder,
            Side::Code => &cfg.code_encoder,
        }
    }

    fn encoder(self, model: &MatchModel) -> &Encoder {
        match self {
            Side::Task => &model.task_encoder,
            Side::Code => &model.code_encoder,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Side::Task => "task",
            Side::Code => "code",
        }
    }
}

/// Embeddings of one side for the current step. Frozen sides are read from
/// a precomputed map; trainable toy sides are re-encoded with their rows.
struct SideView {
    frozen: Option<Arc<EmbeddingMap>>,
}

impl SideView {
    fn embed(
        &self,
        side: Side,
        model: &MatchModel,
        pair: &TaskCodePair,
    ) -> Result<(EmbeddingOutput, Option<Vec<usize>>)> {
        if let Some(map) = &self.frozen {
            return Ok((map[&pair.id].clone(), None));
        }
        match side.encoder(model) {
            Encoder::Toy(toy) => {
                let (out, rows) = toy.encode_with_rows(side.text(pair))?;
                Ok((out, Some(rows)))
            }
            _ => unreachable!("only toy encoders train"),
        }
    }
}

fn encode_side(side: Side, encoder: &Encoder, pairs: &[&TaskCodePair]) -> Result<EmbeddingMap> {
    let texts: Vec<&str> = pairs.iter().map(|p| side.text(p)).collect();
    let outs = encoder.encode_batch(&texts)?;
    Ok(pairs.iter().map(|p| p.id.clone()).zip(outs).collect())
}

/// Trains metric variants on one dataset.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    cfg: TrainingConfig,
    external: [Option<(Encoder, Arc<EmbeddingMap>)>; 2],
}

impl<'a> Trainer<'a> {
    /// Validates `cfg` and encodes the whole dataset once for every file or
    /// service backed side.
    pub fn new(dataset: &'a Dataset, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(DataError::EmptyDataset.into());
        }
        let all: Vec<&TaskCodePair> = dataset.pairs().iter().collect();
        let mut external = [None, None];
        for (slot, side) in external.iter_mut().zip([Side::Task, Side::Code]) {
            let spec = side.spec(&cfg);
            if spec.backend != Backend::Toy {
                let encoder = encoders::open_external(spec, &cfg.service)?;
                let map = encode_side(side, &encoder, &all)?;
                if let Some(bad) = map.values().find(|e| e.dim() != spec.dim) {
                    return Err(EncoderError::DimensionMismatch {
                        expected: spec.dim,
                        got: bad.dim(),
                    }
                    .into());
                }
                *slot = Some((encoder, Arc::new(map)));
            }
        }
        Ok(Trainer { dataset, cfg, external })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }

    /// The untrained model for `plan`: toy vocabularies come from the train
    /// and validation partitions only, and all draws derive from the plan seed.
    pub fn initial_model(&self, plan: &SplitPlan) -> Result<MatchModel> {
        let visible: Vec<&TaskCodePair> = self
            .dataset
            .pairs()
            .iter()
            .filter(|p| matches!(plan.partition_of(&p.id), Some(Partition::Train | Partition::Validation)))
            .collect();
        let build = |side: Side, slot: &Option<(Encoder, Arc<EmbeddingMap>)>| -> Encoder {
            match slot {
                Some((encoder, _)) => encoder.clone(),
                None => {
                    let mut rng = substream(plan.seed, &format!("init.{}_encoder", side.name()), 0);
                    let texts = visible.iter().map(|p| side.text(p));
                    Encoder::Toy(ToyEncoder::build(texts, side.spec(&self.cfg).dim, &mut rng))
                }
            }
        };
        let task_encoder = build(Side::Task, &self.external[0]);
        let code_encoder = build(Side::Code, &self.external[1]);
        let params = EnhancementParameters::init(
            &self.cfg.enhancement,
            self.cfg.task_encoder.dim,
            &mut substream(plan.seed, "init.enhancement", 0),
        )?;
        Ok(MatchModel {
            task_spec: self.cfg.task_encoder.clone(),
            code_spec: self.cfg.code_encoder.clone(),
            task_encoder,
            code_encoder,
            params,
        })
    }

    fn side_views(&self, model: &MatchModel, pairs: &[&TaskCodePair]) -> Result<[SideView; 2]> {
        let view = |side: Side, slot: &Option<(Encoder, Arc<EmbeddingMap>)>| -> Result<SideView> {
            if let Some((_, map)) = slot {
                return Ok(SideView {
                    frozen: Some(Arc::clone(map)),
                });
            }
            if side.spec(&self.cfg).trainable {
                return Ok(SideView { frozen: None });
            }
            Ok(SideView {
                frozen: Some(Arc::new(encode_side(side, side.encoder(model), pairs)?)),
            })
        };
        Ok([
            view(Side::Task, &self.external[0])?,
            view(Side::Code, &self.external[1])?,
        ])
    }

    /// Trains one model on `plan` and scores its test partition once.
    pub fn train_one(&self, split_index: usize, plan: &SplitPlan) -> Result<Experiment> {
        plan.check_covers(self.dataset)?;
        let cfg = &self.cfg;
        let pick = |part: Partition| -> Result<Vec<&TaskCodePair>> {
            let ids = plan.ids(self.dataset, part);
            if ids.is_empty() {
                return Err(TrainError::EmptyPartition {
                    split: split_index,
                    partition: part,
                });
            }
            Ok(ids
                .into_iter()
                .map(|id| self.dataset.get(id).expect("covered id"))
                .collect())
        };
        let train = pick(Partition::Train)?;
        let validation = pick(Partition::Validation)?;
        let test = pick(Partition::Test)?;
        let kind = self.dataset.label_kind();
        let scale = self.dataset.scale();

        let mut model = self.initial_model(plan)?;
        let all: Vec<&TaskCodePair> = self.dataset.pairs().iter().collect();
        let views = self.side_views(&model, &all)?;
        let trains_task = views[0].frozen.is_none();
        let trains_code = views[1].frozen.is_none();

        let enh_shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.data.len()).collect();
        let mut enh_opt = Optimizer::new(cfg.optimizer, &enh_shapes);
        let table_len = |e: &Encoder| match e {
            Encoder::Toy(t) => t.table().len(),
            _ => 0,
        };
        let mut task_opt = Optimizer::new(cfg.optimizer, &[table_len(&model.task_encoder)]);
        let mut code_opt = Optimizer::new(cfg.optimizer, &[table_len(&model.code_encoder)]);
        let encoder_lr = cfg.learning_rate * cfg.encoder_lr_multiplier;

        let mut stopping = EarlyStopping::new(cfg.patience);
        let mut best = model.clone();
        let mut history = Vec::new();
        let mut gradient_ids = BTreeSet::new();
        let mut order = train.clone();

        for epoch in 1..=cfg.max_epochs {
            order.shuffle(&mut substream(plan.seed, "train.shuffle", epoch as u64));
            let mut dropout = substream(plan.seed, "train.dropout", epoch as u64);
            let mut loss_sum = 0.0;
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                let step = batch_gradients(&model, &views, batch, kind, scale, &cfg.loss, &mut dropout)?;
                let finite = step.as_ref().is_some_and(|step| {
                    step.loss.is_finite()
                        && step.params.is_finite()
                        && step.task_table.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
                        && step.code_table.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
                });
                let Some(step) = step.filter(|_| finite) else {
                    return Err(TrainError::NonFinite {
                        split: split_index,
                        epoch,
                        batch: b + 1,
                    });
                };
                gradient_ids.extend(batch.iter().map(|p| p.id.clone()));
                loss_sum += step.per_pair_loss_sum;

                let grads: Vec<&[f64]> = step.params.tensors().iter().map(|t| t.data).collect();
                enh_opt.step(model.params.tensors_mut(), grads, cfg.learning_rate);
                for (trains, opt, encoder, grad) in [
                    (trains_task, &mut task_opt, &mut model.task_encoder, &step.task_table),
                    (trains_code, &mut code_opt, &mut model.code_encoder, &step.code_table),
                ] {
                    if let (true, Encoder::Toy(toy), Some(g)) = (trains, encoder, grad) {
                        let table = toy.table_mut().as_slice_mut().expect("standard layout");
                        opt.step(vec![table], vec![g.as_slice().expect("standard layout")], encoder_lr);
                    }
                }
                if !model_is_finite(&model) {
                    return Err(TrainError::NonFinite {
                        split: split_index,
                        epoch,
                        batch: b + 1,
                    });
                }
            }
            let train_loss = loss_sum / train.len() as f64;
            let validation_loss = partition_loss(&model, &views, &validation, kind, scale, &cfg.loss)?;
            if !validation_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    split: split_index,
                    epoch,
                    batch: 0,
                });
            }
            let improved = stopping.observe(epoch, validation_loss);
            if improved {
                best = model.clone();
            }
            log::debug!("split {split_index} epoch {epoch}: train {train_loss:.6} validation {validation_loss:.6}");
            history.push(EpochRecord {
                epoch,
                train_loss,
                validation_loss,
                improved,
            });
            if stopping.should_stop() {
                break;
            }
        }

        let test_ids: Vec<String> = test.iter().map(|p| p.id.clone()).collect();
        let leaked: Vec<String> = test_ids
            .iter()
            .filter(|id| gradient_ids.contains(*id))
            .cloned()
            .collect();
        if !leaked.is_empty() {
            return Err(TrainError::Leakage {
                split: split_index,
                ids: leaked,
            });
        }

        let mut scores = Vec::with_capacity(test.len());
        for pair in &test {
            let (t, _) = views[0].embed(Side::Task, &best, pair)?;
            let (c, _) = views[1].embed(Side::Code, &best, pair)?;
            scores.push(best.score_embeddings(&t, &c)?);
        }
        let labels = test.iter().map(|p| p.label.value()).collect();

        let (task_vocabulary, code_vocabulary) = checkpoint::vocabularies(&best);
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            variant_name: cfg.variant_name(),
            config: cfg.clone(),
            split_index,
            split: SplitFingerprint {
                seed: plan.seed,
                ratios: plan.ratios,
                dataset_checksum: self.dataset.checksum(),
            },
            input_dim: cfg.task_encoder.dim,
            enhancement: best.params.config(),
            best_validation_loss: stopping.best_loss(),
            best_epoch: stopping.best_epoch(),
            epochs_run: history.len(),
            task_vocabulary,
            code_vocabulary,
        };
        let result = ExperimentResult {
            split_index,
            split_seed: plan.seed,
            variant_name: cfg.variant_name(),
            test_ids,
            scores,
            labels,
            history,
            best_epoch: stopping.best_epoch(),
            gradient_ids,
        };
        Ok(Experiment {
            checkpoint: Checkpoint { meta, model: best },
            result,
        })
    }

    /// Builds `n_experiments` split plans and trains one model per plan,
    /// running up to `jobs` experiments at once. Results keep plan order.
    pub fn run_protocol(&self, n_experiments: usize, jobs: usize) -> Result<Vec<Experiment>> {
        let plans = make_splits(self.dataset, self.cfg.seed, self.cfg.ratios, n_experiments)?;
        if jobs <= 1 {
            return plans.iter().enumerate().map(|(i, p)| self.train_one(i, p)).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        pool.install(|| {
            plans
                .par_iter()
                .enumerate()
                .map(|(i, p)| self.train_one(i, p))
                .collect()
        })
    }
}

/// Trains on one plan; see [`Trainer::train_one`].
pub fn train_one(dataset: &Dataset, plan: &SplitPlan, cfg: &TrainingConfig) -> Result<Experiment> {
    Trainer::new(dataset, cfg.clone())?.train_one(0, plan)
}

/// Runs the repeated split protocol single-threaded.
pub fn run_protocol(dataset: &Dataset, cfg: &TrainingConfig, n_experiments: usize) -> Result<Vec<Experiment>> {
    Trainer::new(dataset, cfg.clone())?.run_protocol(n_experiments, 1)
}

/// Loss of `model` over `ids` in eval mode, as monitored for early stopping.
pub fn evaluation_loss(model: &MatchModel, dataset: &Dataset, ids: &[&str], loss: &LossConfig) -> Result<f64> {
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let pair = dataset.get(id).ok_or_else(|| DataError::Uncovered((*id).to_owned()))?;
        let t = model.encode_task(&pair.task)?;
        let c = model.encode_code(&pair.code)?;
        pairs.push((model.score_embeddings(&t, &c)?, pair.label.value()));
    }
    Ok(objectives::batch_loss(&pairs, dataset.label_kind(), dataset.scale(), loss)?.0)
}

fn model_is_finite(model: &MatchModel) -> bool {
    let table_ok = |e: &Encoder| match e {
        Encoder::Toy(t) => t.table().iter().all(|v| v.is_finite()),
        _ => true,
    };
    model.params.is_finite() && table_ok(&model.task_encoder) && table_ok(&model.code_encoder)
}

fn partition_loss(
    model: &MatchModel,
    views: &[SideView; 2],
    pairs: &[&TaskCodePair],
    kind: crate::datamodel::LabelKind,
    scale: Option<f64>,
    loss: &LossConfig,
) -> Result<f64> {
    let mut scored = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (t, _) = views[0].embed(Side::Task, model, pair)?;
        let (c, _) = views[1].embed(Side::Code, model, pair)?;
        scored.push((model.score_embeddings(&t, &c)?, pair.label.value()));
    }
    Ok(objectives::batch_loss(&scored, kind, scale, loss)?.0)
}

struct StepGradients {
    loss: f64,
    per_pair_loss_sum: f64,
    params: EnhancementParameters,
    task_table: Option<ndarray::Array2<f64>>,
    code_table: Option<ndarray::Array2<f64>>,
}

fn batch_gradients(
    model: &MatchModel,
    views: &[SideView; 2],
    batch: &[&TaskCodePair],
    kind: crate::datamodel::LabelKind,
    scale: Option<f64>,
    loss: &LossConfig,
    dropout: &mut StreamRng,
) -> Result<Option<StepGradients>> {
    struct Item {
        trace: ForwardTrace,
        d_task: ndarray::Array1<f64>,
        d_code: ndarray::Array1<f64>,
        rows: [Option<Vec<usize>>; 2],
    }
    let mut items = Vec::with_capacity(batch.len());
    let mut scored = Vec::with_capacity(batch.len());
    let mut per_pair_loss_sum = 0.0;
    for pair in batch {
        let (t, task_rows) = views[0].embed(Side::Task, model, pair)?;
        let (c, code_rows) = views[1].embed(Side::Code, model, pair)?;
        let (enhanced, trace) = model.params.forward(&t, &c, Some(dropout))?;
        if !enhanced.task.iter().chain(enhanced.code.iter()).all(|v| v.is_finite()) {
            return Ok(None);
        }
        let (f, d_task, d_code) = scoring::cosine_with_grad(enhanced.task.view(), enhanced.code.view())?;
        let y = pair.label.value();
        per_pair_loss_sum += objectives::pair_loss(kind, f, y, scale, loss)?;
        scored.push((f, y));
        items.push(Item {
            trace,
            d_task,
            d_code,
            rows: [task_rows, code_rows],
        });
    }
    let (batch_loss, dl_df) = objectives::batch_loss(&scored, kind, scale, loss)?;

    let table_grad = |e: &Encoder, trains: bool| match (e, trains) {
        (Encoder::Toy(t), true) => Some(ndarray::Array2::zeros(t.table().raw_dim())),
        _ => None,
    };
    let mut task_table = table_grad(&model.task_encoder, views[0].frozen.is_none());
    let mut code_table = table_grad(&model.code_encoder, views[1].frozen.is_none());
    let mut params = model.params.zeros_like();
    for (item, g) in items.iter().zip(dl_df) {
        if g == 0.0 {
            continue;
        }
        let (pg, inputs) = model
            .params
            .backward(&item.trace, (&item.d_task * g).view(), (&item.d_code * g).view())?;
        params.add_scaled(&pg, 1.0);
        if let (Some(acc), Some(rows)) = (task_table.as_mut(), &item.rows[0]) {
            ToyEncoder::accumulate_row_grads(rows, &inputs.task, acc);
        }
        if let (Some(acc), Some(rows)) = (code_table.as_mut(), &item.rows[1]) {
            ToyEncoder::accumulate_row_grads(rows, &inputs.code, acc);
        }
    }
    Ok(Some(StepGradients {
        loss: batch_loss,
        per_pair_loss_sum,
        params,
        task_table,
        code_table,
    }))
}
