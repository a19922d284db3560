//! Initial embeddings for task text and code.
//!
//! Three backends produce [`EmbeddingOutput`]s: the trainable [`ToyEncoder`],
//! precomputed per-token vectors read from a JSON-Lines file, and an HTTP
//! embedding service. All of them pool by the arithmetic mean of the token rows.

mod cache;
mod file;
mod service;
mod tokenize;
mod toy;

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use cache::{
    cache_embeddings, decode_cache, encode_cache, encode_dataset, load_cache, write_cache, EmbeddingStore,
    CACHE_FORMAT_VERSION,
};
pub use file::FileEmbeddings;
pub use service::{ServiceConfig, ServiceEncoder, ENDPOINT_ENV};
pub use tokenize::tokenize;
pub use toy::{ToyEncoder, OOV_BUCKETS};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("text is empty or whitespace-only")]
    EmptyText,
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding has {got} columns, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token count {tokens} does not match {rows} vector rows")]
    TokenRowMismatch { tokens: usize, rows: usize },
    #[error("text not found in embedding file: {0:?}")]
    MissingText(String),
    #[error("encoder backend {actual} does not match spec backend {expected}")]
    BackendMismatch { expected: Backend, actual: Backend },
    #[error("invalid encoder spec: {0}")]
    Spec(String),
    #[error("invalid encoder parameters: {0}")]
    Parameters(String),
    #[error("embedding service transport failure: {0}")]
    Transport(String),
    #[error("malformed embedding service response: {0}")]
    MalformedResponse(String),
    #[error("embedding file {path}: {message}")]
    File { path: String, message: String },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EncoderError> = std::result::Result<T, E>;

/// Token sequence with one vector per token and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingOutput {
    pub tokens: Vec<String>,
    pub vectors: Array2<f64>,
    pub pooled: Array1<f64>,
}

impl EmbeddingOutput {
    pub fn from_rows(tokens: Vec<String>, vectors: Array2<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyText);
        }
        if tokens.len() != vectors.nrows() {
            return Err(EncoderError::TokenRowMismatch {
                tokens: tokens.len(),
                rows: vectors.nrows(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        let pooled = vectors.mean_axis(Axis(0)).expect("at least one row");
        Ok(EmbeddingOutput {
            tokens,
            vectors,
            pooled,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    File,
    Service,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Toy => "toy",
            Backend::File => "file",
            Backend::Service => "service",
        })
    }
}

/// Which backend encodes one side, at which width, and whether it trains.
///
/// For the file backend `name` is the path of the embedding file; for the
/// service backend it is an informational model name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub backend: Backend,
    pub name: String,
    pub dim: usize,
    pub trainable: bool,
}

impl EncoderSpec {
    pub fn toy(dim: usize, trainable: bool) -> Self {
        EncoderSpec {
            backend: Backend::Toy,
            name: "toy".into(),
            dim,
            trainable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EncoderError::Spec("dimension must be positive".into()));
        }
        if self.trainable && self.backend != Backend::Toy {
            return Err(EncoderError::Spec(format!(
                "the {} backend cannot be trainable",
                self.backend
            )));
        }
        Ok(())
    }

    /// Short family label used in variant names, e.g. `Toy(T)`.
    pub fn label(&self) -> String {
        let family = match self.backend {
            Backend::Toy => "Toy".to_string(),
            Backend::File | Backend::Service => self.name.clone(),
        };
        format!("{family}({})", if self.trainable { "T" } else { "F" })
    }
}

/// Backend parameters behind an [`EncoderSpec`].
#[derive(Debug, Clone)]
pub enum Encoder {
    Toy(ToyEncoder),
    File(FileEmbeddings),
    Service(ServiceEncoder),
}

impl Encoder {
    pub fn backend(&self) -> Backend {
        match self {
            Encoder::Toy(_) => Backend::Toy,
            Encoder::File(_) => Backend::File,
            Encoder::Service(_) => Backend::Service,
        }
    }

    pub fn encode(&self, text: &str) -> Result<EmbeddingOutput> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        match self {
            Encoder::Toy(toy) => toy.encode_with_rows(text).map(|(out, _)| out),
            Encoder::File(file) => file.encode(text),
            Encoder::Service(service) => service
                .encode_batch(&[text])?
                .pop()
                .ok_or_else(|| EncoderError::MalformedResponse("empty response".into())),
        }
    }

    /// Encodes several texts; the service backend sends them in one request.
    pub fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingOutput>> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EncoderError::EmptyText);
        }
        match self {
            Encoder::Service(service) => service.encode_batch(texts),
            _ => texts.iter().map(|t| self.encode(t)).collect(),
        }
    }

    /// Digest of the backend parameters, used to verify frozen encoders.
    pub fn checksum(&self) -> String {
        match self {
            Encoder::Toy(toy) => toy.checksum(),
            Encoder::File(file) => file.checksum(),
            Encoder::Service(service) => service.checksum(),
        }
    }
}

/// Encodes `text` after checking that `encoder` matches `spec`.
pub fn encode(spec: &EncoderSpec, encoder: &Encoder, text: &str) -> Result<EmbeddingOutput> {
    check_spec(spec, encoder)?;
    let out = encoder.encode(text)?;
    if out.dim() != spec.dim {
        return Err(EncoderError::DimensionMismatch {
            expected: spec.dim,
            got: out.dim(),
        });
    }
    Ok(out)
}

/// Opens the encoder for a file or service spec. Toy encoders are built
/// from data by the training loop instead.
pub fn open_external(spec: &EncoderSpec, service: &ServiceConfig) -> Result<Encoder> {
    spec.validate()?;
    match spec.backend {
        Backend::File => Ok(Encoder::File(FileEmbeddings::open(
            std::path::Path::new(&spec.name),
            spec.dim,
        )?)),
        Backend::Service => Ok(Encoder::Service(ServiceEncoder::new(&spec.name, spec.dim, service)?)),
        Backend::Toy => Err(EncoderError::Spec("toy encoders are built from a dataset".into())),
    }
}

pub(crate) fn check_spec(spec: &EncoderSpec, encoder: &Encoder) -> Result<()> {
    spec.validate()?;
    if spec.backend != encoder.backend() {
        return Err(EncoderError::BackendMismatch {
            expected: spec.backend,
            actual: encoder.backend(),
        });
    }
    Ok(())
}
