//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "MATCHCKP"
//! version   u32
//! meta_len  u64
//! meta      meta_len bytes of JSON (CheckpointMeta)
//! count     u32
//! count × { name_len u32, name bytes, ndim u32, dims u64 × ndim, values f64 × prod(dims) }
//! ```
//!
//! Tensors follow the enhancement layer's declaration order, then
//! `task_encoder.table` and `code_encoder.table` for toy encoders. Toy
//! vocabularies are stored in the metadata, listed in row order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{self, Backend, Encoder, EncoderSpec, ToyEncoder};
use crate::enhancement::{EnhancementConfig, EnhancementParameters};
use crate::rng::substream;

use super::{MatchModel, Result, TrainError, TrainingConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MATCHCKP";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Identifies the data a checkpoint was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFingerprint {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub dataset_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub variant_name: String,
    pub config: TrainingConfig,
    pub split_index: usize,
    pub split: SplitFingerprint,
    pub input_dim: usize,
    pub enhancement: EnhancementConfig,
    pub best_validation_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task_vocabulary: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub code_vocabulary: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: MatchModel,
}

fn vocabulary_in_row_order(toy: &ToyEncoder) -> Vec<String> {
    let mut words = vec![String::new(); toy.vocabulary().len()];
    for (w, &row) in toy.vocabulary() {
        words[row] = w.clone();
    }
    words
}

fn toy_of(encoder: &Encoder) -> Option<&ToyEncoder> {
    match encoder {
        Encoder::Toy(t) => Some(t),
        _ => None,
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let n = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(n).map_err(|_| TrainError::Checkpoint("length overflow".into()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name_len = self.len(false)?;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let ndim = self.len(false)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.len(true)?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TrainError::Checkpoint("tensor too large".into()))?;
        let raw = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| TrainError::Checkpoint("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("checkpoint metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(&meta);

        let tensors = self.model.params.tensors();
        let tables: Vec<(&str, &ToyEncoder)> = [
            ("task_encoder.table", toy_of(&self.model.task_encoder)),
            ("code_encoder.table", toy_of(&self.model.code_encoder)),
        ]
        .into_iter()
        .filter_map(|(n, t)| t.map(|t| (n, t)))
        .collect();
        buf.extend_from_slice(&((tensors.len() + tables.len()) as u32).to_le_bytes());
        for t in &tensors {
            put_tensor(&mut buf, &t.name, &t.shape, t.data);
        }
        for (name, toy) in tables {
            let table = toy.table().as_standard_layout();
            put_tensor(
                &mut buf,
                name,
                table.shape(),
                table.as_slice().expect("standard layout"),
            );
        }
        buf
    }

    /// Decodes a checkpoint. File and service encoders are reopened from
    /// their specs; toy encoders are restored from the stored tables.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported format version {version}")));
        }
        let meta_len = r.len(true)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let count = r.len(false)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes after tensors".into()));
        }

        let template =
            EnhancementParameters::init(&meta.enhancement, meta.input_dim, &mut substream(0, "template", 0))?;
        let expected = template.tensors();
        if tensors.len() < expected.len() {
            return Err(TrainError::Checkpoint("missing enhancement tensors".into()));
        }
        for ((name, shape, _), want) in tensors.iter().zip(&expected) {
            if *name != want.name || *shape != want.shape {
                return Err(TrainError::Checkpoint(format!(
                    "tensor {name} {shape:?} does not match expected {} {:?}",
                    want.name, want.shape
                )));
            }
        }
        let n_enh = expected.len();
        let flat: Vec<Vec<f64>> = tensors[..n_enh].iter().map(|(_, _, d)| d.clone()).collect();
        let params = template.with_tensors(&flat)?;

        let mut extra: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
        for (name, shape, data) in tensors.into_iter().skip(n_enh) {
            extra.insert(name, (shape, data));
        }
        let task_encoder = restore_encoder(
            &meta.config.task_encoder,
            &meta,
            meta.task_vocabulary.as_deref(),
            extra.remove("task_encoder.table"),
        )?;
        let code_encoder = restore_encoder(
            &meta.config.code_encoder,
            &meta,
            meta.code_vocabulary.as_deref(),
            extra.remove("code_encoder.table"),
        )?;
        if let Some(name) = extra.keys().next() {
            return Err(TrainError::Checkpoint(format!("unexpected tensor {name}")));
        }
        let model = MatchModel {
            task_spec: meta.config.task_encoder.clone(),
            code_spec: meta.config.code_encoder.clone(),
            task_encoder,
            code_encoder,
            params,
        };
        Ok(Checkpoint { meta, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn restore_encoder(
    spec: &EncoderSpec,
    meta: &CheckpointMeta,
    vocabulary: Option<&[String]>,
    table: Option<(Vec<usize>, Vec<f64>)>,
) -> Result<Encoder> {
    match spec.backend {
        Backend::Toy => {
            let (vocabulary, (shape, data)) = vocabulary
                .zip(table)
                .ok_or_else(|| TrainError::Checkpoint("toy encoder without vocabulary or table".into()))?;
            if shape.len() != 2 || shape[1] != spec.dim {
                return Err(TrainError::Checkpoint(format!(
                    "toy table shape {shape:?} does not match the encoder spec"
                )));
            }
            let table = Array2::from_shape_vec((shape[0], shape[1]), data)
                .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            let vocab = vocabulary.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
            Ok(Encoder::Toy(ToyEncoder::from_parts(vocab, table)?))
        }
        Backend::File | Backend::Service => {
            if table.is_some() {
                return Err(TrainError::Checkpoint("table stored for a non-toy encoder".into()));
            }
            Ok(encoders::open_external(spec, &meta.config.service)?)
        }
    }
}

/// Captures the vocabularies of toy encoders for [`CheckpointMeta`].
pub(crate) fn vocabularies(model: &MatchModel) -> (Option<Vec<String>>, Option<Vec<String>>) {
    (
        toy_of(&model.task_encoder).map(vocabulary_in_row_order),
        toy_of(&model.code_encoder).map(vocabulary_in_row_order),
    )
}
