//! Run configuration: TOML file, then `--set key=value` overrides, on top of
//! the built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use match_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub experiments: usize,
    pub jobs: usize,
    pub training: TrainingConfig,
    pub report: ReportOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            output_dir: None,
            experiments: 5,
            jobs: 1,
            training: TrainingConfig::default(),
            report: ReportOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportOptions {
    /// Add the lexical baselines for pairs that carry a reference.
    pub baselines: bool,
    /// Row name for the trained metric; the variant name when unset.
    pub metric_name: Option<String>,
    /// Precomputed per-id scores of other metrics, reported as given.
    pub external: Vec<ExternalScores>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            baselines: true,
            metric_name: None,
            external: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScores {
    pub name: String,
    pub path: PathBuf,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override. Values parse as TOML and fall back
/// to a plain string.
pub fn apply_set(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got {assignment:?}"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("--set: bad key {key:?}");
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("--set {key}: {part} is not a table"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut table = Table::try_from(RunConfig::default()).context("serializing defaults")?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Table = text
                .parse()
                .with_context(|| format!("parsing config {}", path.display()))?;
            merge(&mut table, file);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiments == 0 {
            bail!("experiments must be at least 1");
        }
        if self.jobs == 0 {
            bail!("jobs must be at least 1");
        }
        self.training.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn set_overrides_nested_keys() {
        let sets = vec![
            "training.enhancement.shared_dim=64".to_string(),
            "training.task_encoder.trainable=false".to_string(),
            "training.enhancement.variant=cross_attention".to_string(),
            "dataset=data/x.jsonl".to_string(),
        ];
        let cfg = RunConfig::load(None, &sets).unwrap();
        assert_eq!(cfg.training.enhancement.shared_dim, 64);
        assert!(!cfg.training.task_encoder.trainable);
        assert_eq!(cfg.training.task_encoder.dim, 64);
        assert_eq!(cfg.dataset, Some(PathBuf::from("data/x.jsonl")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["training.learning_rat=1".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["experiments".into()]).is_err());
        assert!(RunConfig::load(None, &["experiments=0".into()]).is_err());
    }
}
