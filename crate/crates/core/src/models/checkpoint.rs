//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ECGICDCK" | version u32 | meta_len u64 | meta JSON
//! n_tensors u32 | { name_len u32 | name | dtype u8 | ndim u32 | dims u64.. | data }*
//! crc32 u32   (over every preceding byte)
//! ```
//!
//! Tensor names carry a section prefix: `param/`, `buffer/`, `adam_m/`,
//! `adam_v/`. dtype 1 is f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, Parameters, Tensor};
use crate::trainer::AdamState;

pub const MAGIC: &[u8; 8] = b"ECGICDCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters,
    pub optimizer: Option<AdamState>,
    /// 1-based epoch the parameters come from; 0 before training.
    pub epoch: usize,
    pub val_macro_auroc: Option<f64>,
    pub label_codes: Vec<String>,
    pub label_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    epoch: usize,
    val_macro_auroc: Option<f64>,
    label_codes: Vec<String>,
    label_fingerprint: String,
    optimizer_step: Option<u64>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
    for &d in &t.shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl ModelCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta = Meta {
            config: self.config.clone(),
            epoch: self.epoch,
            val_macro_auroc: self.val_macro_auroc,
            label_codes: self.label_codes.clone(),
            label_fingerprint: self.label_fingerprint.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.t),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        tensors.extend(self.params.tensors().map(|(k, t)| (format!("param/{k}"), t)));
        tensors.extend(self.params.buffers().map(|(k, t)| (format!("buffer/{k}"), t)));
        if let Some(o) = &self.optimizer {
            tensors.extend(o.m.tensors().map(|(k, t)| (format!("adam_m/{k}"), t)));
            tensors.extend(o.v.tensors().map(|(k, t)| (format!("adam_v/{k}"), t)));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_tensor(&mut out, name, t);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if buf.len() < MAGIC.len() + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        let mut c = Cursor { buf: body, pos: MAGIC.len() };
        let version = c.u32()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let meta_len = c.u64()? as usize;
        let meta: Meta = serde_json::from_slice(c.take(meta_len)?)?;
        let n = c.u32()?;
        let mut params = Parameters::default();
        let (mut m, mut v) = (Parameters::default(), Parameters::default());
        for _ in 0..n {
            let name_len = c.u32()? as usize;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = c.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Malformed(format!("{name}: unknown dtype {dtype}")));
            }
            let ndim = c.u32()? as usize;
            let shape = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let count: usize = shape.iter().product();
            let raw = c.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            let t = Tensor { shape, data };
            let (section, key) = name
                .split_once('/')
                .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} has no section")))?;
            match section {
                "param" => params.insert(key, t),
                "buffer" => params.insert_buffer(key, t),
                "adam_m" => m.insert(key, t),
                "adam_v" => v.insert(key, t),
                other => return Err(CheckpointError::Malformed(format!("unknown section {other}"))),
            }
        }
        if c.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(ModelCheckpoint {
            config: meta.config,
            params,
            optimizer: meta.optimizer_step.map(|t| AdamState { t, m, v }),
            epoch: meta.epoch,
            val_macro_auroc: meta.val_macro_auroc,
            label_codes: meta.label_codes,
            label_fingerprint: meta.label_fingerprint,
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
