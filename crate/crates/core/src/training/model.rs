//! A trained metric: two encoders plus the enhancement layer.

use crate::encoders::{self, EmbeddingOutput, Encoder, EncoderSpec};
use crate::enhancement::EnhancementParameters;
use crate::scoring::{self, MatchScore};

use super::{Result, TrainError};

#[derive(Debug, Clone)]
pub struct MatchModel {
    pub task_spec: EncoderSpec,
    pub code_spec: EncoderSpec,
    pub task_encoder: Encoder,
    pub code_encoder: Encoder,
    pub params: EnhancementParameters,
}

impl MatchModel {
    /// `MATCH(Encoder(X), E)` style name, e.g. `MATCH(Toy(T), Linear)`.
    pub fn variant_name(&self) -> String {
        variant_name(&self.task_spec, self.params.variant().label())
    }

    /// Eval-mode score of already-encoded inputs.
    pub fn score_embeddings(&self, task: &EmbeddingOutput, code: &EmbeddingOutput) -> Result<f64> {
        let (pair, _) = self.params.forward(task, code, None)?;
        Ok(scoring::match_score(&pair)?.value())
    }

    pub fn encode_task(&self, text: &str) -> Result<EmbeddingOutput> {
        Ok(encoders::encode(&self.task_spec, &self.task_encoder, text)?)
    }

    pub fn encode_code(&self, text: &str) -> Result<EmbeddingOutput> {
        Ok(encoders::encode(&self.code_spec, &self.code_encoder, text)?)
    }

    /// `f(t, c)` in `[-1, 1]`.
    pub fn score(&self, task: &str, code: &str) -> Result<MatchScore> {
        let t = self.encode_task(task)?;
        let c = self.encode_code(code)?;
        let value = self.score_embeddings(&t, &c)?;
        MatchScore::new(value).ok_or(TrainError::NonFiniteScore)
    }
}

pub fn variant_name(encoder: &EncoderSpec, enhancement: &str) -> String {
    format!("MATCH({}, {enhancement})", encoder.label())
}
