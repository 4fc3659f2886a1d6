//! Self-describing binary checkpoints.
//!
//! Layout: the 8-byte magic `WMLABCK1`, a little-endian `u64` header length,
//! a JSON header, then the raw little-endian tensor data. The header carries
//! the model kind, its config, the training seed, the element type and one
//! `{name, shape, offset, len}` record per tensor (offsets in elements).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::nn::ParamLayout;

pub const MAGIC: &[u8; 8] = b"WMLABCK1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub config: Value,
    pub seed: u64,
    pub dtype: Dtype,
    pub tensors: Vec<TensorRecord>,
    /// Free-form extras such as training reports or schedule constants.
    #[serde(default)]
    pub extra: Value,
}

/// In-memory checkpoint. Parameters are always held as `f64`; `dtype` only
/// controls the on-disk width.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub data: Vec<f64>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize, seed: u64, layout: &ParamLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(LabError::Checkpoint(format!("layout has {} values, buffer {}", layout.total(), data.len())));
        }
        let tensors = layout
            .entries()
            .iter()
            .map(|e| TensorRecord { name: e.name.clone(), shape: e.shape.clone(), offset: e.slot.offset, len: e.slot.len })
            .collect();
        let header = Header {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            seed,
            dtype: Dtype::F64,
            tensors,
            extra: Value::Null,
        };
        Ok(Self { header, data })
    }

    pub fn with_extra(mut self, extra: &impl Serialize) -> Result<Self> {
        self.header.extra = serde_json::to_value(extra)?;
        Ok(self)
    }

    pub fn with_dtype(mut self, dtype: Dtype) -> Self {
        self.header.dtype = dtype;
        self
    }

    pub fn config<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.config.clone())?)
    }

    pub fn extra<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.header.extra.clone())?)
    }

    /// Errors unless the checkpoint holds `kind` with tensors matching `layout`.
    pub fn expect(&self, kind: &str, layout: &ParamLayout) -> Result<()> {
        if self.header.kind != kind {
            return Err(LabError::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.header.kind)));
        }
        let ok = self.header.tensors.len() == layout.entries().len()
            && self.header.tensors.iter().zip(layout.entries()).all(|(t, e)| {
                t.name == e.name && t.shape == e.shape && t.offset == e.slot.offset && t.len == e.slot.len
            });
        if !ok {
            return Err(LabError::Checkpoint(format!("{kind} tensor layout differs from the configured network")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + self.data.len() * self.header.dtype.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        match self.header.dtype {
            Dtype::F32 => self.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| LabError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let raw = &body[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        let width = header.dtype.width();
        if raw.len() != total * width {
            return Err(LabError::Checkpoint(format!("expected {} data bytes, found {}", total * width, raw.len())));
        }
        let data = match header.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        };
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        // write then rename so a crashed run never leaves a truncated file
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&self.to_bytes()?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
