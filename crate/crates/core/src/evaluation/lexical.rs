//! Sentence-level lexical overlap baselines: BLEU, ROUGE-1/2/L and chrF.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped overlap, candidate total and reference total for order `n`.
fn overlap<T: Eq + Hash + Clone>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, c)| (*c).min(*refs.get(g).unwrap_or(&0))).sum();
    (
        matched,
        candidate.len().saturating_sub(n - 1),
        reference.len().saturating_sub(n - 1),
    )
}

/// Sentence BLEU with brevity penalty. Orders above one with no matches
/// use add-one smoothing `1 / (total + 1)`.
pub fn bleu<T: AsRef<str>>(candidate: &[T], reference: &[T], max_n: usize) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if max_n == 0 {
        return Err(EvalError::Config("BLEU order must be positive".into()));
    }
    if candidate.is_empty() {
        log::warn!("empty BLEU candidate scored as 0");
        return Ok(0.0);
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refs: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total, _) = overlap(&cand, &refs, n);
        let precision = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (cand.len() as f64, refs.len() as f64);
    let brevity = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok((brevity * (log_sum / max_n as f64).exp()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RougeMode {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "L")]
    Lcs,
}

fn f1(matched: f64, cand_total: f64, ref_total: f64) -> f64 {
    if matched == 0.0 {
        return 0.0;
    }
    let p = matched / cand_total;
    let r = matched / ref_total;
    2.0 * p * r / (p + r)
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE F1. When neither side has an n-gram of the order the score is 1
/// for identical inputs and 0 otherwise.
pub fn rouge<T: AsRef<str>>(candidate: &[T], reference: &[T], mode: RougeMode) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let cand: Vec<&str> = candidate.iter().map(AsRef::as_ref).collect();
    let refs: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let score = match mode {
        RougeMode::One | RougeMode::Two => {
            let n = if mode == RougeMode::One { 1 } else { 2 };
            let (matched, ct, rt) = overlap(&cand, &refs, n);
            if ct == 0 && rt == 0 {
                return Ok(if cand == refs { 1.0 } else { 0.0 });
            }
            f1(matched as f64, ct as f64, rt as f64)
        }
        RougeMode::Lcs => f1(lcs_len(&cand, &refs) as f64, cand.len() as f64, refs.len() as f64),
    };
    Ok(score.clamp(0.0, 1.0))
}

pub const CHRF_ORDER: usize = 6;
pub const CHRF_BETA: f64 = 2.0;

/// chrF over whitespace-stripped characters. Precision and recall are
/// averaged over the orders that both strings are long enough to have.
pub fn chrf(candidate: &str, reference: &str, max_n: usize, beta: f64) -> Result<f64> {
    let cand: Vec<char> = candidate.chars().filter(|c| !c.is_whitespace()).collect();
    let refs: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if refs.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0usize);
    for n in 1..=max_n {
        let (matched, ct, rt) = overlap(&cand, &refs, n);
        if ct == 0 || rt == 0 {
            continue;
        }
        p_sum += matched as f64 / ct as f64;
        r_sum += matched as f64 / rt as f64;
        orders += 1;
    }
    if orders == 0 {
        return Ok(if cand == refs { 1.0 } else { 0.0 });
    }
    let (p, r) = (p_sum / orders as f64, r_sum / orders as f64);
    if p + r == 0.0 {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    Ok(((1.0 + b2) * p * r / (b2 * p + r)).clamp(0.0, 1.0))
}

/// Baseline names in report order.
pub const BASELINES: [&str; 5] = ["BLEU", "ROUGE-1", "ROUGE-2", "ROUGE-L", "chrF"];

/// All baselines for one candidate/reference pair of code strings, in
/// [`BASELINES`] order. Token-level metrics use the shared tokenizer.
pub fn baseline_scores(candidate: &str, reference: &str) -> Result<[f64; 5]> {
    let c = crate::encoders::tokenize(candidate);
    let r = crate::encoders::tokenize(reference);
    Ok([
        bleu(&c, &r, 4)?,
        rouge(&c, &r, RougeMode::One)?,
        rouge(&c, &r, RougeMode::Two)?,
        rouge(&c, &r, RougeMode::Lcs)?,
        chrf(candidate, reference, CHRF_ORDER, CHRF_BETA)?,
    ])
}
