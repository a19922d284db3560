//! Trainable bag-of-tokens encoder: an embedding table with mean pooling.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use super::{tokenize, EmbeddingOutput, EncoderError};

/// Rows reserved at the end of the table for out-of-vocabulary tokens.
pub const OOV_BUCKETS: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    vocabulary: BTreeMap<String, usize>,
    table: Array2<f64>,
}

fn fnv1a(token: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in token.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl ToyEncoder {
    /// Builds a vocabulary from `texts` (sorted, deduplicated) and draws the
    /// table uniformly from `[-1, 1]`.
    pub fn build<'a, R: Rng>(texts: impl IntoIterator<Item = &'a str>, dim: usize, rng: &mut R) -> Self {
        let mut words: Vec<String> = texts.into_iter().flat_map(tokenize).collect();
        words.sort();
        words.dedup();
        let vocabulary: BTreeMap<String, usize> = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        let rows = vocabulary.len() + OOV_BUCKETS;
        let table = Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-1.0..=1.0));
        ToyEncoder { vocabulary, table }
    }

    pub fn from_parts(vocabulary: BTreeMap<String, usize>, table: Array2<f64>) -> Result<Self, EncoderError> {
        let expected = vocabulary.len() + OOV_BUCKETS;
        if table.nrows() != expected {
            return Err(EncoderError::Parameters(format!(
                "toy table has {} rows, vocabulary needs {expected}",
                table.nrows()
            )));
        }
        if vocabulary.values().any(|&row| row >= vocabulary.len()) {
            return Err(EncoderError::Parameters("vocabulary row out of range".into()));
        }
        Ok(ToyEncoder { vocabulary, table })
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn vocabulary(&self) -> &BTreeMap<String, usize> {
        &self.vocabulary
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Array2<f64> {
        &mut self.table
    }

    pub fn row_of(&self, token: &str) -> usize {
        match self.vocabulary.get(token) {
            Some(&row) => row,
            None => self.vocabulary.len() + (fnv1a(token) % OOV_BUCKETS as u64) as usize,
        }
    }

    /// Encodes `text` and returns the table row used for each token.
    pub fn encode_with_rows(&self, text: &str) -> Result<(EmbeddingOutput, Vec<usize>), EncoderError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let rows: Vec<usize> = tokens.iter().map(|t| self.row_of(t)).collect();
        let vectors = self.table.select(Axis(0), &rows);
        Ok((EmbeddingOutput::from_rows(tokens, vectors)?, rows))
    }

    /// Scatters per-token gradients into a table-shaped gradient buffer.
    pub fn accumulate_row_grads(rows: &[usize], row_grads: &Array2<f64>, table_grad: &mut Array2<f64>) {
        for (&row, grad) in rows.iter().zip(row_grads.outer_iter()) {
            let mut target = table_grad.row_mut(row);
            target += &grad;
        }
    }

    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (token, row) in &self.vocabulary {
            hasher.update(token.as_bytes());
            hasher.update([0]);
            hasher.update((*row as u64).to_le_bytes());
        }
        for v in self.table.iter() {
            hasher.update(v.to_le_bytes());
        }
        crate::datamodel::hex_digest(&hasher.finalize())
    }
}
