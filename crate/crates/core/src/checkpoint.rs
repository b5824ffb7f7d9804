//! Binary checkpoint: model weights, prototypes and memory queues.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | content                                  |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `b"CITRCKPT"`                      |
//! | 8      | 4    | format version (`u32`, currently 1)      |
//! | 12     | 8    | metadata length `m` in bytes (`u64`)     |
//! | 20     | m    | UTF-8 JSON [`CheckpointMeta`]            |
//! | 20+m   | 8    | number of `f64` values `n` (`u64`)       |
//! | 28+m   | 8n   | `f64` values, little-endian              |
//!
//! The value blob holds, in order: the eight model tensors in
//! [`ModelParams::TENSOR_NAMES`] order (weights row-major),
//! then `mu` and `sigma` of each prototype listed in `meta.prototype_classes`,
//! then the queued embeddings of each `(class, length)` in `meta.queue_lengths`,
//! oldest first. The file digest is the SHA-256 of the whole file.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::losses::{ClassPrototypes, MemoryQueue, Prototype, QueueConfig};
use crate::model::{ModelDims, ModelParams, TrackingModel};

pub const MAGIC: &[u8; 8] = b"CITRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dims: ModelDims,
    /// Class id of each classifier row.
    pub classes: Vec<ClassId>,
    pub stage: usize,
    pub method: String,
    pub seed: u64,
    /// Digest of the checkpoint this one was initialized from.
    pub parent_digest: Option<String>,
    pub prototype_classes: Vec<ClassId>,
    pub queue_config: QueueConfig,
    pub queue_lengths: Vec<(ClassId, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TrackingModel,
    pub prototypes: ClassPrototypes,
    pub queue: MemoryQueue,
    pub stage: usize,
    pub method: String,
    pub seed: u64,
    pub parent_digest: Option<String>,
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            dims: self.model.params.dims(),
            classes: self.model.classes.clone(),
            stage: self.stage,
            method: self.method.clone(),
            seed: self.seed,
            parent_digest: self.parent_digest.clone(),
            prototype_classes: self.prototypes.classes.keys().copied().collect(),
            queue_config: self.queue.config,
            queue_lengths: self.queue.queues.iter().map(|(&c, q)| (c, q.len())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta()).map_err(|e| Error::Format(e.to_string()))?;
        let mut values: Vec<f64> = Vec::with_capacity(self.model.params.num_params());
        for t in self.model.params.tensors() {
            values.extend_from_slice(t);
        }
        for p in self.prototypes.classes.values() {
            values.extend_from_slice(&p.mu);
            values.extend_from_slice(&p.sigma);
        }
        for q in self.queue.queues.values() {
            for v in q {
                values.extend_from_slice(v);
            }
        }
        let mut out = Vec::with_capacity(28 + meta.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let m = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(m)?).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let n = r.u64()? as usize;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("checkpoint size overflow".into()))?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint blob".into()));
        }
        let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut next = |k: usize| -> Result<Vec<f64>> {
            let v: Vec<f64> = values.by_ref().take(k).collect();
            if v.len() != k {
                return Err(Error::Format("checkpoint blob shorter than metadata implies".into()));
            }
            Ok(v)
        };

        if meta.dims.n_classes != meta.classes.len() {
            return Err(Error::Format("class list does not match classifier width".into()));
        }
        let mut params = ModelParams::zeros(meta.dims);
        for t in params.tensors_mut() {
            let k = t.len();
            t.copy_from_slice(&next(k)?);
        }
        let d = meta.dims.embed_dim;
        let mut prototypes = ClassPrototypes::default();
        for &c in &meta.prototype_classes {
            let mu = next(d)?;
            let sigma = next(d)?;
            prototypes.classes.insert(c, Prototype { mu, sigma });
        }
        let mut queues = BTreeMap::new();
        for &(c, len) in &meta.queue_lengths {
            let q: VecDeque<Vec<f64>> = (0..len).map(|_| next(d)).collect::<Result<_>>()?;
            queues.insert(c, q);
        }
        if next(1).is_ok() {
            return Err(Error::Format("checkpoint blob longer than metadata implies".into()));
        }
        if !params.is_finite() {
            return Err(Error::Numerical("checkpoint holds non-finite weights".into()));
        }
        Ok(Self {
            model: TrackingModel::new(params, meta.classes)?,
            prototypes,
            queue: MemoryQueue { config: meta.queue_config, queues },
            stage: meta.stage,
            method: meta.method,
            seed: meta.seed,
            parent_digest: meta.parent_digest,
        })
    }

    /// Writes the checkpoint and returns its digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, &bytes)?;
        Ok(digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("checkpoint {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(digest(&self.to_bytes()?))
    }
}
