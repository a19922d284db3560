//! Precomputed per-token embeddings read from a JSON-Lines file.
//!
//! Each line is `{"text": ..., "tokens": [...], "vectors": [[...], ...]}`
//! with one vector per token. Lookups are by exact text.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{EmbeddingOutput, EncoderError, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRecord {
    text: String,
    tokens: Vec<String>,
    vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    entries: Arc<HashMap<String, EmbeddingOutput>>,
    dim: usize,
    checksum: String,
}

pub(crate) fn rows_to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Result<Array2<f64>> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * dim);
    for row in rows {
        if row.len() != dim {
            return Err(EncoderError::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
        flat.extend(row);
    }
    Ok(Array2::from_shape_vec((n, dim), flat).expect("shape checked"))
}

impl FileEmbeddings {
    pub fn parse(text: &str, dim: usize, origin: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| EncoderError::File {
                path: origin.to_owned(),
                message: format!("line {}: {message}", idx + 1),
            };
            let rec: FileRecord = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let vectors = rows_to_matrix(rec.vectors, dim).map_err(|e| bad(e.to_string()))?;
            let out = EmbeddingOutput::from_rows(rec.tokens, vectors).map_err(|e| bad(e.to_string()))?;
            entries.insert(rec.text, out);
        }
        Ok(FileEmbeddings {
            entries: Arc::new(entries),
            dim,
            checksum: crate::datamodel::hex_digest(&Sha256::digest(text.as_bytes())),
        })
    }

    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| EncoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, dim, &path.display().to_string())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<EmbeddingOutput> {
        self.entries
            .get(text)
            .cloned()
            .ok_or_else(|| EncoderError::MissingText(text.to_owned()))
    }

    pub fn checksum(&self) -> String {
        self.checksum.clone()
    }
}
