//! Contrastive training objectives and their derivatives with respect to the
//! score `f(t, c)`.
//!
//! Binary labels use a hinge: `1 - f'` for positives and `max(0, f' - m)`
//! for negatives, where `f' = clamp(f / temperature, -1, 1)`. Continuous
//! labels use the squared error between `(1 + f) / 2` and `y / S`.

use serde::{Deserialize, Serialize};

use crate::datamodel::LabelKind;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("binary label must be 0 or 1, got {0}")]
    BinaryLabel(f64),
    #[error("continuous label {value} outside [0, {scale}]")]
    ContinuousLabel { value: f64, scale: f64 },
    #[error("scale must be positive, got {0}")]
    Scale(f64),
    #[error("score {0} is not finite")]
    Score(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.0,
            temperature: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    /// Temperature 0.07 as used for the published runs.
    pub fn smoothed() -> Self {
        LossConfig {
            temperature: 0.07,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.margin) {
            return Err(LossError::Config(format!("margin {} outside [-1, 1]", self.margin)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(LossError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }

    fn tempered(&self, f: f64) -> f64 {
        (f / self.temperature).clamp(-1.0, 1.0)
    }
}

fn check_score(f: f64) -> Result<()> {
    if f.is_finite() {
        Ok(())
    } else {
        Err(LossError::Score(f))
    }
}

fn check_binary(y: f64) -> Result<bool> {
    if y == 1.0 {
        Ok(true)
    } else if y == 0.0 {
        Ok(false)
    } else {
        Err(LossError::BinaryLabel(y))
    }
}

fn check_continuous(y: f64, scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(LossError::Scale(scale));
    }
    if !(y.is_finite() && (0.0..=scale).contains(&y)) {
        return Err(LossError::ContinuousLabel { value: y, scale });
    }
    Ok(())
}

pub fn binary_loss(f: f64, y: f64, cfg: &LossConfig) -> Result<f64> {
    check_score(f)?;
    let positive = check_binary(y)?;
    let ft = cfg.tempered(f);
    Ok(if positive { 1.0 - ft } else { (ft - cfg.margin).max(0.0) })
}

pub fn continuous_loss(f: f64, y: f64, scale: f64, _cfg: &LossConfig) -> Result<f64> {
    check_score(f)?;
    check_continuous(y, scale)?;
    let diff = (1.0 + f) / 2.0 - y / scale;
    Ok(diff * diff)
}

/// `∂L/∂f`. For binary labels the temperature clamp is passed through, and
/// the hinge corner `f' = m` takes subgradient 0.
pub fn loss_gradient(kind: LabelKind, f: f64, y: f64, scale: Option<f64>, cfg: &LossConfig) -> Result<f64> {
    check_score(f)?;
    match kind {
        LabelKind::Binary => {
            let inv_t = 1.0 / cfg.temperature;
            if check_binary(y)? {
                Ok(-inv_t)
            } else if cfg.tempered(f) > cfg.margin {
                Ok(inv_t)
            } else {
                Ok(0.0)
            }
        }
        LabelKind::Continuous => {
            let scale = scale.ok_or(LossError::Scale(f64::NAN))?;
            check_continuous(y, scale)?;
            Ok((1.0 + f) / 2.0 - y / scale)
        }
    }
}

pub fn pair_loss(kind: LabelKind, f: f64, y: f64, scale: Option<f64>, cfg: &LossConfig) -> Result<f64> {
    match kind {
        LabelKind::Binary => binary_loss(f, y, cfg),
        LabelKind::Continuous => continuous_loss(f, y, scale.ok_or(LossError::Scale(f64::NAN))?, cfg),
    }
}

/// Reduced loss over `(score, label)` pairs and the gradient for each score.
pub fn batch_loss(
    pairs: &[(f64, f64)],
    kind: LabelKind,
    scale: Option<f64>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let factor = match cfg.reduction {
        Reduction::Mean => 1.0 / pairs.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(pairs.len());
    for &(f, y) in pairs {
        total += pair_loss(kind, f, y, scale, cfg)?;
        grads.push(factor * loss_gradient(kind, f, y, scale, cfg)?);
    }
    Ok((total * factor, grads))
}
