//! Task/code records, the JSON-Lines dataset format and seeded splits.
//!
//! A dataset file holds one JSON object per line:
//!
//! ```text
//! {"id":"HumanEval/0#0","task":"...","code":"...","label":1.0,"label_kind":"binary","language":"python"}
//! {"id":"q12#3","task":"...","code":"...","label":3.75,"label_kind":"continuous","scale":4.0,"language":"python"}
//! ```
//!
//! `scale` is present iff `label_kind` is `"continuous"`. An optional
//! `reference` field carries a reference implementation used only by the
//! lexical baselines.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: label kind {found} differs from the dataset's {expected}")]
    MixedKinds {
        line: usize,
        expected: LabelKind,
        found: LabelKind,
    },
    #[error("line {line}: scale {found} differs from the dataset's {expected}")]
    MixedScales { line: usize, expected: f64, found: f64 },
    #[error("dataset has label kind {found}, expected {expected}")]
    KindMismatch { expected: LabelKind, found: LabelKind },
    #[error("pair {id}: label {value} out of range ({detail})")]
    LabelRange { id: String, value: f64, detail: String },
    #[error("pair {id}: {field} is empty or whitespace-only")]
    EmptyText { id: String, field: &'static str },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid split ratios {0:?}: each must be positive and they must sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("n_experiments must be at least 1")]
    NoExperiments,
    #[error("dataset of {0} pairs is too small to populate train, validation and test")]
    TooSmall(usize),
    #[error("split plan does not cover id {0}")]
    Uncovered(String),
    #[error("invalid split plan: {0}")]
    Plan(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Binary,
    Continuous,
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Binary => "binary",
            LabelKind::Continuous => "continuous",
        })
    }
}

/// Quality label of a pair. Binary labels are 0 or 1; continuous labels lie
/// in `[0, scale]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Label {
    Binary(bool),
    Continuous { value: f64, scale: f64 },
}

impl Label {
    pub fn binary(value: f64) -> Result<Self, String> {
        if value == 0.0 {
            Ok(Label::Binary(false))
        } else if value == 1.0 {
            Ok(Label::Binary(true))
        } else {
            Err("binary labels must be 0 or 1".into())
        }
    }

    pub fn continuous(value: f64, scale: f64) -> Result<Self, String> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(format!("scale {scale} must be a positive finite number"));
        }
        if !(value.is_finite() && (0.0..=scale).contains(&value)) {
            return Err(format!("continuous labels must lie in [0, {scale}]"));
        }
        Ok(Label::Continuous { value, scale })
    }

    pub fn kind(&self) -> LabelKind {
        match self {
            Label::Binary(_) => LabelKind::Binary,
            Label::Continuous { .. } => LabelKind::Continuous,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Label::Binary(b) => f64::from(u8::from(b)),
            Label::Continuous { value, .. } => value,
        }
    }

    pub fn scale(&self) -> Option<f64> {
        match *self {
            Label::Binary(_) => None,
            Label::Continuous { scale, .. } => Some(scale),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCodePair {
    pub id: String,
    pub task: String,
    pub code: String,
    pub label: Label,
    pub language: String,
    pub reference: Option<String>,
}

impl TaskCodePair {
    fn validate(&self) -> Result<()> {
        if self.task.trim().is_empty() {
            return Err(DataError::EmptyText {
                id: self.id.clone(),
                field: "task",
            });
        }
        if self.code.trim().is_empty() {
            return Err(DataError::EmptyText {
                id: self.id.clone(),
                field: "code",
            });
        }
        Ok(())
    }
}

/// On-disk form of one dataset line. Field order here is the canonical order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    task: String,
    code: String,
    label: f64,
    label_kind: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
}

impl From<&TaskCodePair> for Record {
    fn from(p: &TaskCodePair) -> Self {
        Record {
            id: p.id.clone(),
            task: p.task.clone(),
            code: p.code.clone(),
            label: p.label.value(),
            label_kind: p.label.kind(),
            scale: p.label.scale(),
            language: p.language.clone(),
            reference: p.reference.clone(),
        }
    }
}

/// An ordered, validated collection of pairs sharing one label kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pairs: Vec<TaskCodePair>,
    label_kind: LabelKind,
    scale: Option<f64>,
}

impl Dataset {
    pub fn new(pairs: Vec<TaskCodePair>) -> Result<Self> {
        let first = pairs.first().ok_or(DataError::EmptyDataset)?;
        let label_kind = first.label.kind();
        let scale = first.label.scale();
        let mut seen = HashSet::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            p.validate()?;
            if p.label.kind() != label_kind {
                return Err(DataError::MixedKinds {
                    line: i + 1,
                    expected: label_kind,
                    found: p.label.kind(),
                });
            }
            if p.label.scale() != scale {
                return Err(DataError::MixedScales {
                    line: i + 1,
                    expected: scale.unwrap_or(f64::NAN),
                    found: p.label.scale().unwrap_or(f64::NAN),
                });
            }
            if !seen.insert(p.id.as_str()) {
                return Err(DataError::DuplicateId(p.id.clone()));
            }
        }
        Ok(Dataset {
            pairs,
            label_kind,
            scale,
        })
    }

    pub fn pairs(&self) -> &[TaskCodePair] {
        &self.pairs
    }

    pub fn label_kind(&self) -> LabelKind {
        self.label_kind
    }

    pub fn scale(&self) -> Option<f64> {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TaskCodePair> {
        self.pairs.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.id.as_str())
    }

    /// Canonical JSON-Lines serialization.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&serde_json::to_string(&Record::from(p)).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn checksum(&self) -> String {
        hex_digest(&Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_record(line_no: usize, line: &str) -> Result<TaskCodePair> {
    let rec: Record = serde_json::from_str(line).map_err(|e| DataError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let label = match rec.label_kind {
        LabelKind::Binary => {
            if rec.scale.is_some() {
                return Err(DataError::Malformed {
                    line: line_no,
                    message: "`scale` is only allowed for continuous labels".into(),
                });
            }
            Label::binary(rec.label)
        }
        LabelKind::Continuous => {
            let scale = rec.scale.ok_or_else(|| DataError::Malformed {
                line: line_no,
                message: "continuous labels require `scale`".into(),
            })?;
            Label::continuous(rec.label, scale)
        }
    }
    .map_err(|detail| DataError::LabelRange {
        id: rec.id.clone(),
        value: rec.label,
        detail,
    })?;
    let pair = TaskCodePair {
        id: rec.id,
        task: rec.task,
        code: rec.code,
        label,
        language: rec.language,
        reference: rec.reference,
    };
    pair.validate()?;
    Ok(pair)
}

/// Parses JSON-Lines text. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_dataset(text: &str, expected_kind: Option<LabelKind>) -> Result<Dataset> {
    let mut pairs = Vec::new();
    let mut first_kind: Option<(LabelKind, Option<f64>)> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let pair = parse_record(line_no, line)?;
        match first_kind {
            None => first_kind = Some((pair.label.kind(), pair.label.scale())),
            Some((kind, scale)) => {
                if pair.label.kind() != kind {
                    return Err(DataError::MixedKinds {
                        line: line_no,
                        expected: kind,
                        found: pair.label.kind(),
                    });
                }
                if pair.label.scale() != scale {
                    return Err(DataError::MixedScales {
                        line: line_no,
                        expected: scale.unwrap_or(f64::NAN),
                        found: pair.label.scale().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        pairs.push(pair);
    }
    let dataset = Dataset::new(pairs)?;
    if let Some(expected) = expected_kind {
        if dataset.label_kind() != expected {
            return Err(DataError::KindMismatch {
                expected,
                found: dataset.label_kind(),
            });
        }
    }
    Ok(dataset)
}

pub fn load_dataset(path: &Path, expected_kind: Option<LabelKind>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    parse_dataset(&text, expected_kind)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let io_err = |source| DataError::Io {
        path: path.to_owned(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(dataset.to_jsonl().as_bytes()).map_err(io_err)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Validation,
    Test,
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// Assignment of every dataset id to one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, Partition>,
}

impl SplitPlan {
    /// Ids of one partition, in dataset order.
    pub fn ids<'a>(&self, dataset: &'a Dataset, part: Partition) -> Vec<&'a str> {
        dataset
            .ids()
            .filter(|id| self.assignments.get(*id) == Some(&part))
            .collect()
    }

    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        self.assignments.get(id).copied()
    }

    pub fn count(&self, part: Partition) -> usize {
        self.assignments.values().filter(|p| **p == part).count()
    }

    /// Checks that the plan assigns exactly the dataset's ids.
    pub fn check_covers(&self, dataset: &Dataset) -> Result<()> {
        for id in dataset.ids() {
            if !self.assignments.contains_key(id) {
                return Err(DataError::Uncovered(id.to_owned()));
            }
        }
        if self.assignments.len() != dataset.len() {
            return Err(DataError::Plan(format!(
                "plan assigns {} ids but the dataset has {}",
                self.assignments.len(),
                dataset.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("split plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DataError::Plan(e.to_string()))
    }
}

fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    Ok(())
}

/// Partition sizes: train and validation are floored, test takes the rest.
/// Any partition left empty borrows one item from the largest partition.
pub fn partition_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    validate_ratios(ratios)?;
    if n < 3 {
        return Err(DataError::TooSmall(n));
    }
    // The epsilon keeps products like 100 * 0.7 from flooring to 69.
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let train = floor(ratios[0]).min(n);
    let validation = floor(ratios[1]).min(n - train);
    let mut sizes = [train, validation, n - train - validation];
    for i in 0..3 {
        if sizes[i] == 0 {
            let largest = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[largest] -= 1;
            sizes[i] += 1;
        }
    }
    Ok(sizes)
}

/// Builds `n_experiments` plans; plan `i` shuffles the id list with seed
/// `seed + i` and slices it into train, validation and test.
pub fn make_splits(dataset: &Dataset, seed: u64, ratios: [f64; 3], n_experiments: usize) -> Result<Vec<SplitPlan>> {
    if n_experiments == 0 {
        return Err(DataError::NoExperiments);
    }
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let sizes = partition_sizes(dataset.len(), ratios)?;
    Ok((0..n_experiments as u64)
        .map(|i| {
            let plan_seed = seed.wrapping_add(i);
            let mut ids: Vec<&str> = dataset.ids().collect();
            ids.shuffle(&mut crate::rng::substream(plan_seed, "split", 0));
            let mut assignments = BTreeMap::new();
            for (pos, id) in ids.into_iter().enumerate() {
                let part = if pos < sizes[0] {
                    Partition::Train
                } else if pos < sizes[0] + sizes[1] {
                    Partition::Validation
                } else {
                    Partition::Test
                };
                assignments.insert(id.to_owned(), part);
            }
            SplitPlan {
                seed: plan_seed,
                ratios,
                assignments,
            }
        })
        .collect())
}
