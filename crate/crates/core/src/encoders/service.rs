//! HTTP embedding provider.
//!
//! One `POST` per batch with body `{"texts": [...]}`. The response is
//! `{"vectors": [[[...], ...], ...], "tokens": [[...], ...]}`: for each text,
//! its per-token vectors and the matching tokens.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::file::rows_to_matrix;
use super::{EmbeddingOutput, EncoderError, Result};

/// Environment variable consulted when no endpoint is configured.
pub const ENDPOINT_ENV: &str = "MATCH_EMBEDDING_ENDPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub retries: u32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            endpoint: None,
            timeout_secs: 30.0,
            retries: 2,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<Vec<f64>>>,
    tokens: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct ServiceEncoder {
    endpoint: String,
    name: String,
    dim: usize,
    retries: u32,
    agent: ureq::Agent,
}

impl ServiceEncoder {
    pub fn new(name: &str, dim: usize, config: &ServiceConfig) -> Result<Self> {
        let endpoint = match &config.endpoint {
            Some(e) => e.clone(),
            None => std::env::var(ENDPOINT_ENV).map_err(|_| {
                EncoderError::Spec(format!("no service endpoint configured and {ENDPOINT_ENV} is unset"))
            })?,
        };
        if !(config.timeout_secs.is_finite() && config.timeout_secs > 0.0) {
            return Err(EncoderError::Spec("service timeout must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(ServiceEncoder {
            endpoint,
            name: name.to_owned(),
            dim,
            retries: config.retries,
            agent,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn post_once(&self, texts: &[&str]) -> Result<String> {
        let mut response = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| EncoderError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(EncoderError::Transport(format!("HTTP status {status}")));
        }
        response
            .body_mut()
            .read_to_string()
            .map_err(|e| EncoderError::Transport(e.to_string()))
    }

    pub fn encode_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingOutput>> {
        let mut attempt = 0;
        let body = loop {
            match self.post_once(texts) {
                Ok(body) => break body,
                Err(err) if attempt < self.retries => {
                    log::warn!("embedding request failed (attempt {}): {err}", attempt + 1);
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        let parsed: EmbedResponse =
            serde_json::from_str(&body).map_err(|e| EncoderError::MalformedResponse(e.to_string()))?;
        if parsed.vectors.len() != texts.len() || parsed.tokens.len() != texts.len() {
            return Err(EncoderError::MalformedResponse(format!(
                "expected {} entries, got {} vector lists and {} token lists",
                texts.len(),
                parsed.vectors.len(),
                parsed.tokens.len()
            )));
        }
        parsed
            .tokens
            .into_iter()
            .zip(parsed.vectors)
            .map(|(tokens, rows)| {
                let vectors = rows_to_matrix(rows, self.dim)?;
                EmbeddingOutput::from_rows(tokens, vectors)
            })
            .collect()
    }

    /// Identifies the remote model; remote weights are never modified.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.endpoint.as_bytes());
        hasher.update([0]);
        hasher.update(self.name.as_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        crate::datamodel::hex_digest(&hasher.finalize())
    }
}
