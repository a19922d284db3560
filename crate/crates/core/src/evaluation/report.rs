//! Per-split correlations aggregated into a metric comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::stats::{kendall_tau_b, pearson, spearman};
use super::{EvalError, Result};

/// A statistic that may be undefined (zero variance, no data).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stat {
    Value(f64),
    Undef,
}

impl Stat {
    fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(v) => Stat::Value(v),
            Err(_) => Stat::Undef,
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Stat::Value(v) => Some(v),
            Stat::Undef => None,
        }
    }

    pub fn render(self) -> String {
        match self {
            Stat::Value(v) => format!("{v:.3}"),
            Stat::Undef => "undef".into(),
        }
    }
}

impl Serialize for Stat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stat::Value(v) => s.serialize_f64(*v),
            Stat::Undef => s.serialize_str("undef"),
        }
    }
}

impl<'de> Deserialize<'de> for Stat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Stat::Value(v)),
            Raw::Text(t) if t == "undef" => Ok(Stat::Undef),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unexpected statistic {t:?}"))),
        }
    }
}

/// Kendall τ, Spearman and Pearson for one metric on one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub tau: Stat,
    pub spearman: Stat,
    pub pearson: Stat,
}

impl Correlations {
    pub fn compute(scores: &[f64], labels: &[f64]) -> Self {
        Correlations {
            tau: Stat::from_result(kendall_tau_b(scores, labels)),
            spearman: Stat::from_result(spearman(scores, labels)),
            pearson: Stat::from_result(pearson(scores, labels)),
        }
    }
}

/// Mean and sample standard deviation over the defined per-split values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Stat,
    pub std: Stat,
    /// Number of splits with a defined value.
    pub n: usize,
    /// Set when only one value was available, so `std` is reported as 0.
    pub single: bool,
}

impl Aggregate {
    pub fn of(values: &[Stat]) -> Self {
        let defined: Vec<f64> = values.iter().filter_map(|s| s.value()).collect();
        let n = defined.len();
        match n {
            0 => Aggregate {
                mean: Stat::Undef,
                std: Stat::Undef,
                n,
                single: false,
            },
            1 => Aggregate {
                mean: Stat::Value(defined[0]),
                std: Stat::Value(0.0),
                n,
                single: true,
            },
            _ => {
                let mean = defined.iter().sum::<f64>() / n as f64;
                let var = defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                Aggregate {
                    mean: Stat::Value(mean),
                    std: Stat::Value(var.sqrt()),
                    n,
                    single: false,
                }
            }
        }
    }

    fn render(&self) -> String {
        match (self.mean, self.std) {
            (Stat::Value(m), Stat::Value(s)) => format!("{m:.3} ± {s:.3}"),
            _ => "undef".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tau: Aggregate,
    pub spearman: Aggregate,
    pub pearson: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub per_split: Vec<Correlations>,
    pub summary: Summary,
}

/// Scores of every metric on one split's test pairs, aligned with `labels`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitScores {
    pub split_index: usize,
    pub labels: Vec<f64>,
    pub metrics: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kendall_variant: String,
    pub spearman_ties: String,
    pub std_kind: String,
    pub experiments: usize,
    pub split_indices: Vec<usize>,
    pub metrics: Vec<MetricRow>,
}

/// Correlates every metric with the labels per split and aggregates across
/// splits. Metric rows keep the order of first appearance.
pub fn build_report(splits: &[SplitScores]) -> Result<CorrelationReport> {
    if splits.is_empty() {
        return Err(EvalError::Config("no experiments to report".into()));
    }
    let names: Vec<String> = splits[0].metrics.iter().map(|(n, _)| n.clone()).collect();
    for split in splits {
        let these: Vec<&String> = split.metrics.iter().map(|(n, _)| n).collect();
        if these.len() != names.len() || these.iter().zip(&names).any(|(a, b)| *a != b) {
            return Err(EvalError::Config(format!(
                "split {} reports metrics {these:?}, expected {names:?}",
                split.split_index
            )));
        }
        for (name, scores) in &split.metrics {
            if scores.len() != split.labels.len() {
                return Err(EvalError::Config(format!(
                    "split {}: metric {name} has {} scores for {} labels",
                    split.split_index,
                    scores.len(),
                    split.labels.len()
                )));
            }
        }
    }
    let metrics = names
        .iter()
        .enumerate()
        .map(|(m, name)| {
            let per_split: Vec<Correlations> = splits
                .iter()
                .map(|s| Correlations::compute(&s.metrics[m].1, &s.labels))
                .collect();
            let pick = |f: fn(&Correlations) -> Stat| per_split.iter().map(f).collect::<Vec<_>>();
            let summary = Summary {
                tau: Aggregate::of(&pick(|c| c.tau)),
                spearman: Aggregate::of(&pick(|c| c.spearman)),
                pearson: Aggregate::of(&pick(|c| c.pearson)),
            };
            MetricRow {
                metric: name.clone(),
                per_split,
                summary,
            }
        })
        .collect();
    Ok(CorrelationReport {
        kendall_variant: "tau-b".into(),
        spearman_ties: "average".into(),
        std_kind: "sample".into(),
        experiments: splits.len(),
        split_indices: splits.iter().map(|s| s.split_index).collect(),
        metrics,
    })
}

impl CorrelationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,tau_mean,tau_std,spearman_mean,spearman_std,pearson_mean,pearson_std,n\n");
        let cell = |s: Stat| match s {
            Stat::Value(v) => format!("{v}"),
            Stat::Undef => "undef".into(),
        };
        for row in &self.metrics {
            let s = &row.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&row.metric),
                cell(s.tau.mean),
                cell(s.tau.std),
                cell(s.spearman.mean),
                cell(s.spearman.std),
                cell(s.pearson.mean),
                cell(s.pearson.std),
                self.experiments
            );
        }
        out
    }

    /// Aligned table: metric rows, one column per statistic showing
    /// `mean ± std`, with `*` on the best mean in each column.
    pub fn to_text(&self) -> String {
        let columns: [(&str, fn(&Summary) -> &Aggregate); 3] =
            [("τ", |s| &s.tau), ("r_s", |s| &s.spearman), ("r_p", |s| &s.pearson)];
        let mut cells: Vec<Vec<String>> = self.metrics.iter().map(|r| vec![r.metric.clone()]).collect();
        for (_, get) in columns {
            let best = self
                .metrics
                .iter()
                .filter_map(|r| get(&r.summary).mean.value())
                .fold(f64::NEG_INFINITY, f64::max);
            for (row, out) in self.metrics.iter().zip(cells.iter_mut()) {
                let agg = get(&row.summary);
                let mark = if agg.mean.value() == Some(best) { "*" } else { " " };
                let flag = if agg.single { " (n=1)" } else { "" };
                out.push(format!("{}{mark}{flag}", agg.render()));
            }
        }
        let header: Vec<String> = std::iter::once("Metric".to_string())
            .chain(columns.iter().map(|(h, _)| h.to_string()))
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                cells
                    .iter()
                    .map(|r| r[c].chars().count())
                    .chain(std::iter::once(header[c].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |row: &[String]| -> String {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
        }
        let _ = writeln!(
            out,
            "\nτ = Kendall τ-b, r_s = Spearman, r_p = Pearson; mean ± sample std over {} experiment(s); * = best",
            self.experiments
        );
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
