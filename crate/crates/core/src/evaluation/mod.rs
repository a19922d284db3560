//! Metric quality: correlation with labels, lexical baselines, reports.

mod lexical;
mod report;
mod stats;

use std::collections::BTreeMap;

pub use lexical::{baseline_scores, bleu, chrf, rouge, RougeMode, BASELINES, CHRF_BETA, CHRF_ORDER};
pub use report::{build_report, Aggregate, CorrelationReport, Correlations, MetricRow, SplitScores, Stat, Summary};
pub use stats::{average_ranks, kendall_tau_b, pearson, spearman, ScoreSeries};

use crate::datamodel::Dataset;
use crate::training::ExperimentResult;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("undefined correlation: {0}")]
    Undefined(String),
    #[error("reference is empty")]
    EmptyReference,
    #[error("{0}")]
    Config(String),
    #[error("ids do not align; missing: {missing:?}, extra: {extra:?}")]
    IdMismatch { missing: Vec<String>, extra: Vec<String> },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Alias matching the common name of τ-b.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<f64> {
    kendall_tau_b(x, y)
}

/// Per-pair scores of one named metric, keyed by pair id.
pub type ScoreTable = BTreeMap<String, f64>;

/// Lexical baselines against each pair's `reference`, keyed by metric then id.
/// Pairs without a reference are left out.
pub fn dataset_baselines(dataset: &Dataset) -> Result<BTreeMap<String, ScoreTable>> {
    let mut out: BTreeMap<String, ScoreTable> = BTreeMap::new();
    for pair in dataset.pairs() {
        let Some(reference) = pair.reference.as_deref() else {
            continue;
        };
        let scores = baseline_scores(&pair.code, reference)?;
        for (name, v) in BASELINES.iter().zip(scores) {
            out.entry((*name).to_string()).or_default().insert(pair.id.clone(), v);
        }
    }
    Ok(out)
}

/// Joins experiment results with extra per-id metric tables. Every extra
/// table must cover every test id of every experiment.
pub fn split_scores(
    results: &[ExperimentResult],
    metric_name: &str,
    extra: &[(String, ScoreTable)],
) -> Result<Vec<SplitScores>> {
    results
        .iter()
        .map(|r| {
            let mut metrics = vec![(metric_name.to_string(), r.scores.clone())];
            for (name, table) in extra {
                let missing: Vec<String> = r
                    .test_ids
                    .iter()
                    .filter(|id| !table.contains_key(*id))
                    .cloned()
                    .collect();
                if !missing.is_empty() {
                    return Err(EvalError::IdMismatch { missing, extra: vec![] });
                }
                metrics.push((name.clone(), r.test_ids.iter().map(|id| table[id]).collect()));
            }
            Ok(SplitScores {
                split_index: r.split_index,
                labels: r.labels.clone(),
                metrics,
            })
        })
        .collect()
}

/// Checks that `got` holds exactly the ids in `want`.
pub fn check_ids<'a>(want: impl IntoIterator<Item = &'a str>, got: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let want: std::collections::BTreeSet<&str> = want.into_iter().collect();
    let got: std::collections::BTreeSet<&str> = got.into_iter().collect();
    if want == got {
        return Ok(());
    }
    Err(EvalError::IdMismatch {
        missing: want.difference(&got).map(|s| s.to_string()).collect(),
        extra: got.difference(&want).map(|s| s.to_string()).collect(),
    })
}
