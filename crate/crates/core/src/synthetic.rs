//! Seeded synthetic task/code pairs with a known separable structure.
//!
//! Each pair belongs to a topic with its own small vocabulary. Task text
//! uses topic words; code mixes topic words with keywords shared by every
//! topic. Positives draw their code words from the task's topic, negatives
//! from a different topic. Continuous labels grow with the fraction of topic
//! words in the code, so positives sit at or above `0.75 * scale`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DataError, Dataset, Label, LabelKind, TaskCodePair};
use crate::enhancement::Variant;
use crate::rng::substream;
use crate::training::{TrainingConfig, DEFAULT_TOY_DIM};

const TOPICS: [&str; 12] = [
    "sort", "parse", "graph", "matrix", "string", "file", "socket", "cache", "date", "image", "queue", "crypt",
];
const TASK_WORDS: [&str; 6] = ["write", "a", "function", "that", "should", "please"];
const CODE_WORDS: [&str; 10] = ["def", "return", "(", ")", ":", "=", "for", "in", "if", ","];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Topic words in each task description.
    pub task_topic_words: usize,
    /// Leading template words shared by every task description.
    pub task_filler_words: usize,
    /// Total words in each code snippet.
    pub code_len: usize,
    /// Fewest topic words in a positive snippet.
    pub min_topic_words: usize,
    /// Distinct shared keywords used to pad code snippets.
    pub code_fillers: usize,
    pub negative_fraction: f64,
    pub kind: LabelKind,
    /// Label scale for continuous labels.
    pub scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            pairs: 200,
            topics: 4,
            words_per_topic: 3,
            task_topic_words: 6,
            task_filler_words: 3,
            code_len: 8,
            min_topic_words: 6,
            code_fillers: 3,
            negative_fraction: 0.3,
            kind: LabelKind::Continuous,
            scale: 4.0,
        }
    }
}

impl SyntheticConfig {
    pub fn binary() -> Self {
        SyntheticConfig {
            kind: LabelKind::Binary,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Plan(format!("synthetic config: {m}")));
        if self.topics < 2 || self.topics > TOPICS.len() {
            return bad(&format!("topics must be in 2..={}", TOPICS.len()));
        }
        if self.words_per_topic == 0 || self.task_topic_words == 0 || self.code_len == 0 {
            return bad("word counts must be positive");
        }
        if self.min_topic_words == 0 || self.min_topic_words > self.code_len {
            return bad("min_topic_words must be in 1..=code_len");
        }
        if self.task_filler_words > TASK_WORDS.len() {
            return bad(&format!("task_filler_words must be at most {}", TASK_WORDS.len()));
        }
        if self.code_fillers == 0 || self.code_fillers > CODE_WORDS.len() {
            return bad(&format!("code_fillers must be in 1..={}", CODE_WORDS.len()));
        }
        if 4 * self.min_topic_words < 3 * self.code_len {
            return bad("positives must keep at least 75% topic words");
        }
        if !(0.0..1.0).contains(&self.negative_fraction) {
            return bad("negative_fraction must be in [0, 1)");
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad("scale must be positive");
        }
        Ok(())
    }
}

fn topic_word(topic: usize, k: usize) -> String {
    format!("{}_{k}", TOPICS[topic])
}

/// `count` topic words cycling through the topic vocabulary from a random
/// offset, so every word appears `count / words_per_topic` times or one more.
fn topic_words_cycled<R: Rng>(topic: usize, count: usize, cfg: &SyntheticConfig, rng: &mut R) -> Vec<String> {
    let offset = rng.random_range(0..cfg.words_per_topic);
    (0..count)
        .map(|i| topic_word(topic, (offset + i) % cfg.words_per_topic))
        .collect()
}

fn snippet<R: Rng>(topic: usize, topic_words: usize, cfg: &SyntheticConfig, rng: &mut R) -> String {
    let mut words = topic_words_cycled(topic, topic_words, cfg, rng);
    words.extend((topic_words..cfg.code_len).map(|_| CODE_WORDS[..cfg.code_fillers].choose(rng).unwrap().to_string()));
    words.shuffle(rng);
    words.join(" ")
}

/// Training settings for synthetic runs: the defaults, with the enhanced
/// width matched to the toy encoder width.
pub fn toy_training_config(variant: Variant) -> TrainingConfig {
    let mut cfg = TrainingConfig::default();
    cfg.enhancement.variant = variant;
    cfg.enhancement.shared_dim = DEFAULT_TOY_DIM;
    cfg
}

/// Generates a dataset; identical `(cfg, seed)` give identical output.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = substream(seed, "synthetic", 0);
    let negatives = (cfg.pairs as f64 * cfg.negative_fraction).round() as usize;
    let mut is_negative: Vec<bool> = (0..cfg.pairs).map(|i| i < negatives).collect();
    is_negative.shuffle(&mut rng);

    let mut pairs = Vec::with_capacity(cfg.pairs);
    for (i, negative) in is_negative.into_iter().enumerate() {
        let topic = i % cfg.topics;
        let mut task_words = topic_words_cycled(topic, cfg.task_topic_words, cfg, &mut rng);
        task_words.shuffle(&mut rng);
        let task_words: Vec<String> = TASK_WORDS[..cfg.task_filler_words]
            .iter()
            .map(|w| w.to_string())
            .chain(task_words)
            .collect();

        let j = rng.random_range(cfg.min_topic_words..=cfg.code_len);
        let code_topic = if negative {
            (topic + rng.random_range(1..cfg.topics)) % cfg.topics
        } else {
            topic
        };
        let code = snippet(code_topic, j, cfg, &mut rng);
        let reference = snippet(topic, cfg.code_len, cfg, &mut rng);
        let label = match (cfg.kind, negative) {
            (LabelKind::Binary, neg) => Label::Binary(!neg),
            (LabelKind::Continuous, true) => Label::Continuous {
                value: 0.0,
                scale: cfg.scale,
            },
            (LabelKind::Continuous, false) => Label::Continuous {
                value: cfg.scale * j as f64 / cfg.code_len as f64,
                scale: cfg.scale,
            },
        };
        pairs.push(TaskCodePair {
            id: format!("syn-{i:04}"),
            task: task_words.join(" "),
            code,
            label,
            language: "python".into(),
            reference: Some(reference),
        });
    }
    Dataset::new(pairs)
}
