//! On-disk embedding cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  "MATCHEMB"
//! format_version   u32
//! d_enc            u32
//! count            u64
//! checksum         32 bytes SHA-256 of everything after the header
//! count records:
//!   id             u32 length + UTF-8 bytes
//!   task, code     embedding block each:
//!     tokens       u32 count, then per token u32 length + UTF-8 bytes
//!     vectors      count * d_enc f64
//!     pooled       d_enc f64
//! ```
//!
//! Writes go to a sibling temporary file which is renamed into place, so an
//! interrupted write never leaves a readable cache behind.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use super::{EmbeddingOutput, Encoder, EncoderError, Result};
use crate::datamodel::Dataset;

pub const CACHE_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MATCHEMB";
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 32;

/// Task and code embeddings keyed by pair id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    entries: HashMap<String, (EmbeddingOutput, EmbeddingOutput)>,
}

impl EmbeddingStore {
    pub fn insert(&mut self, id: String, task: EmbeddingOutput, code: EmbeddingOutput) {
        if self.entries.insert(id.clone(), (task, code)).is_none() {
            self.ids.push(id);
        }
    }

    pub fn get(&self, id: &str) -> Option<&(EmbeddingOutput, EmbeddingOutput)> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    fn dim(&self) -> Option<usize> {
        self.ids.first().map(|id| self.entries[id].0.dim())
    }
}

/// Encodes every pair with the given encoders.
pub fn encode_dataset(task_encoder: &Encoder, code_encoder: &Encoder, dataset: &Dataset) -> Result<EmbeddingStore> {
    let tasks: Vec<&str> = dataset.pairs().iter().map(|p| p.task.as_str()).collect();
    let codes: Vec<&str> = dataset.pairs().iter().map(|p| p.code.as_str()).collect();
    let task_out = task_encoder.encode_batch(&tasks)?;
    let code_out = code_encoder.encode_batch(&codes)?;
    let mut store = EmbeddingStore::default();
    for ((pair, t), c) in dataset.pairs().iter().zip(task_out).zip(code_out) {
        if t.dim() != c.dim() {
            return Err(EncoderError::DimensionMismatch {
                expected: t.dim(),
                got: c.dim(),
            });
        }
        store.insert(pair.id.clone(), t, c);
    }
    Ok(store)
}

/// Encodes the dataset and writes the cache to `path`.
pub fn cache_embeddings(
    task_encoder: &Encoder,
    code_encoder: &Encoder,
    dataset: &Dataset,
    path: &Path,
) -> Result<EmbeddingStore> {
    let store = encode_dataset(task_encoder, code_encoder, dataset)?;
    write_cache(&store, path)?;
    Ok(store)
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_block(buf: &mut Vec<u8>, out: &EmbeddingOutput) {
    buf.extend_from_slice(&(out.tokens.len() as u32).to_le_bytes());
    for t in &out.tokens {
        put_str(buf, t);
    }
    for v in out.vectors.iter().chain(out.pooled.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_cache(store: &EmbeddingStore) -> Vec<u8> {
    let dim = store.dim().unwrap_or(0);
    let mut body = Vec::new();
    for id in &store.ids {
        let (task, code) = &store.entries[id];
        put_str(&mut body, id);
        put_block(&mut body, task);
        put_block(&mut body, code);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CACHE_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    out
}

pub fn write_cache(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let io_err = |source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = encode_cache(store);
    let mut tmp_name = path.as_os_str().to_owned();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp_name);
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EncoderError::Cache("truncated record".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| EncoderError::Cache("invalid UTF-8".into()))
    }

    fn block(&mut self, dim: usize) -> Result<EmbeddingOutput> {
        let n = self.u32()? as usize;
        let tokens = (0..n).map(|_| self.string()).collect::<Result<Vec<_>>>()?;
        let vectors = (0..n * dim).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let pooled = (0..dim).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let vectors = Array2::from_shape_vec((n, dim), vectors).expect("sized");
        Ok(EmbeddingOutput {
            tokens,
            vectors,
            pooled: Array1::from(pooled),
        })
    }
}

pub fn decode_cache(bytes: &[u8]) -> Result<EmbeddingStore> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(EncoderError::Cache("not an embedding cache".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CACHE_FORMAT_VERSION {
        return Err(EncoderError::Cache(format!("unsupported format version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if Sha256::digest(body).as_slice() != &bytes[24..56] {
        return Err(EncoderError::Cache("checksum mismatch".into()));
    }
    let mut reader = Reader { bytes: body, pos: 0 };
    let mut store = EmbeddingStore::default();
    for _ in 0..count {
        let id = reader.string()?;
        let task = reader.block(dim)?;
        let code = reader.block(dim)?;
        store.insert(id, task, code);
    }
    if reader.pos != body.len() || store.len() as u64 != count {
        return Err(EncoderError::Cache("record count does not match header".into()));
    }
    Ok(store)
}

pub fn load_cache(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|source| EncoderError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_cache(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Label, TaskCodePair};
    use crate::encoders::ToyEncoder;

    fn dataset(n: usize) -> Dataset {
        Dataset::new(
            (0..n)
                .map(|i| TaskCodePair {
                    id: format!("id{i}"),
                    task: format!("sort list number {i}"),
                    code: format!("return sorted(xs[{i}])"),
                    label: Label::Binary(i % 2 == 0),
                    language: "python".into(),
                    reference: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn encoders() -> (Encoder, Encoder) {
        let ds = dataset(4);
        let t = ToyEncoder::build(
            ds.pairs().iter().map(|p| p.task.as_str()),
            6,
            &mut crate::rng::substream(0, "a", 0),
        );
        let c = ToyEncoder::build(
            ds.pairs().iter().map(|p| p.code.as_str()),
            6,
            &mut crate::rng::substream(0, "b", 0),
        );
        (Encoder::Toy(t), Encoder::Toy(c))
    }

    #[test]
    fn round_trip_is_bitwise_equal_to_fresh_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let ds = dataset(4);
        let (t, c) = encoders();
        let written = cache_embeddings(&t, &c, &ds, &path).unwrap();
        let loaded = load_cache(&path).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for pair in ds.pairs() {
            let (lt, lc) = loaded.get(&pair.id).unwrap();
            assert_eq!(lt, &t.encode(&pair.task).unwrap());
            assert_eq!(lc, &c.encode(&pair.code).unwrap());
        }
        assert_eq!(written, loaded);
    }

    #[test]
    fn idempotent_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let ds = dataset(3);
        let (t, c) = encoders();
        cache_embeddings(&t, &c, &ds, &path).unwrap();
        let first = fs::read(&path).unwrap();
        cache_embeddings(&t, &c, &ds, &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn corruption_is_detected() {
        let ds = dataset(2);
        let (t, c) = encoders();
        let store = encode_dataset(&t, &c, &ds).unwrap();
        let mut bytes = encode_cache(&store);
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(decode_cache(&bytes), Err(EncoderError::Cache(_))));
        assert!(matches!(decode_cache(&bytes[..20]), Err(EncoderError::Cache(_))));
    }

    #[test]
    fn counts_entries() {
        let ds = dataset(4);
        let (t, c) = encoders();
        let store = encode_dataset(&t, &c, &ds).unwrap();
        let bytes = encode_cache(&store);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 4);
        assert_eq!(decode_cache(&bytes).unwrap().len(), 4);
    }
}
