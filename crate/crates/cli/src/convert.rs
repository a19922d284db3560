//! Adapters from benchmark result layouts to the dataset schema.
//!
//! Inputs are JSON-Lines or a single JSON array of objects. Extra fields are
//! ignored.
//!
//! * `humaneval`: `task_id`, `prompt`, `completion`, and `passed` (bool) or
//!   `result` (`"passed"` counts as correct). Optional `language` and
//!   `canonical_solution`. Binary labels.
//! * `mbpp_eval`: `task_id`, `text`, `code`, and `pass_ratio` in `[0, 1]` or
//!   `passed_tests` with `total_tests`. Optional `reference`. Continuous
//!   labels, scale 1.
//! * `conala`: `intent` (or a non-null `rewritten_intent`), `snippet`, and
//!   `grade` in `[0, 4]` or a `grades` list that is averaged. Optional
//!   `question_id` and `reference`. Continuous labels, scale 4.

use std::collections::HashMap;

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use match_core::datamodel::{Dataset, Label, TaskCodePair};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceFormat {
    Humaneval,
    #[value(name = "mbpp_eval")]
    MbppEval,
    Conala,
}

fn records(text: &str) -> Result<Vec<Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return serde_json::from_str(trimmed).context("input is not a JSON array of records");
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}: malformed JSON", i + 1)))
        .collect()
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

#[derive(Deserialize)]
struct HumanEvalRecord {
    task_id: Value,
    prompt: String,
    completion: String,
    passed: Option<bool>,
    result: Option<String>,
    language: Option<String>,
    canonical_solution: Option<String>,
}

#[derive(Deserialize)]
struct MbppRecord {
    task_id: Value,
    text: String,
    code: String,
    pass_ratio: Option<f64>,
    passed_tests: Option<f64>,
    total_tests: Option<f64>,
    reference: Option<String>,
}

#[derive(Deserialize)]
struct ConalaRecord {
    question_id: Option<Value>,
    intent: Option<String>,
    rewritten_intent: Option<String>,
    snippet: String,
    grade: Option<f64>,
    grades: Option<Vec<f64>>,
    reference: Option<String>,
}

/// Numbers repeated ids `base#0`, `base#1`, ... in input order.
struct IdCounter(HashMap<String, usize>);

impl IdCounter {
    fn next(&mut self, base: String) -> String {
        let n = self.0.entry(base.clone()).or_insert(0);
        let id = format!("{base}#{n}");
        *n += 1;
        id
    }
}

fn parse<T: for<'de> Deserialize<'de>>(v: Value, i: usize, format: &str) -> Result<T> {
    serde_json::from_value(v).map_err(|e| anyhow!("record {}: not in the {format} layout: {e}", i + 1))
}

pub fn convert(format: SourceFormat, text: &str) -> Result<Dataset> {
    let mut ids = IdCounter(HashMap::new());
    let mut pairs = Vec::new();
    for (i, v) in records(text)?.into_iter().enumerate() {
        let pair = match format {
            SourceFormat::Humaneval => {
                let r: HumanEvalRecord = parse(v, i, "humaneval")?;
                let passed = match (r.passed, r.result.as_deref()) {
                    (Some(p), _) => p,
                    (None, Some(res)) => res == "passed",
                    (None, None) => bail!(
                        "record {}: not in the humaneval layout: needs `passed` or `result`",
                        i + 1
                    ),
                };
                let base = id_string(&r.task_id).ok_or_else(|| anyhow!("record {}: bad task_id", i + 1))?;
                TaskCodePair {
                    id: ids.next(base),
                    task: r.prompt,
                    code: r.completion,
                    label: Label::Binary(passed),
                    language: r.language.unwrap_or_else(|| "python".into()),
                    reference: r.canonical_solution,
                }
            }
            SourceFormat::MbppEval => {
                let r: MbppRecord = parse(v, i, "mbpp_eval")?;
                let ratio = match (r.pass_ratio, r.passed_tests, r.total_tests) {
                    (Some(p), _, _) => p,
                    (None, Some(p), Some(t)) if t > 0.0 => p / t,
                    _ => bail!(
                        "record {}: not in the mbpp_eval layout: needs `pass_ratio` or test counts",
                        i + 1
                    ),
                };
                let base = id_string(&r.task_id).ok_or_else(|| anyhow!("record {}: bad task_id", i + 1))?;
                TaskCodePair {
                    id: ids.next(format!("mbpp-{base}")),
                    task: r.text,
                    code: r.code,
                    label: Label::continuous(ratio, 1.0).map_err(|e| anyhow!("record {}: {e}", i + 1))?,
                    language: "python".into(),
                    reference: r.reference,
                }
            }
            SourceFormat::Conala => {
                let r: ConalaRecord = parse(v, i, "conala")?;
                let task = r
                    .rewritten_intent
                    .or(r.intent)
                    .ok_or_else(|| anyhow!("record {}: not in the conala layout: needs `intent`", i + 1))?;
                let grade = match (r.grade, r.grades) {
                    (Some(g), _) => g,
                    (None, Some(gs)) if !gs.is_empty() => gs.iter().sum::<f64>() / gs.len() as f64,
                    _ => bail!("record {}: not in the conala layout: needs `grade` or `grades`", i + 1),
                };
                let base = r
                    .question_id
                    .as_ref()
                    .and_then(id_string)
                    .unwrap_or_else(|| i.to_string());
                TaskCodePair {
                    id: ids.next(format!("conala-{base}")),
                    task,
                    code: r.snippet,
                    label: Label::continuous(grade, 4.0).map_err(|e| anyhow!("record {}: {e}", i + 1))?,
                    language: "python".into(),
                    reference: r.reference,
                }
            }
        };
        pairs.push(pair);
    }
    Ok(Dataset::new(pairs)?)
}
