//! Checkpoint files.
//!
//! ```text
//! b"PTSNCKPT"  u32 version  u8 dtype (0 = f32, 1 = f64)
//! u32 meta_len  meta_len bytes of JSON
//! u32 n_tensors
//! n_tensors x { u32 name_len, name, u32 rank, rank x u32 dim, values }
//! ```
//!
//! All integers and values are little endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Captioner;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTSNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// JSON metadata plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self, dtype: Dtype) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(match dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                match dtype {
                    Dtype::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::data("not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let dtype = match r.take(1)?[0] {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => return Err(Error::data(format!("unknown checkpoint dtype tag {other}"))),
        };
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                Dtype::F32 => r
                    .take(count * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => r
                    .take(count * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path, dtype: Dtype) -> Result<()> {
        fs::write(path, self.to_bytes(dtype)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    block_levels: Vec<usize>,
    /// `(level, rows, width)` of every prototype table.
    prototypes: Vec<(usize, usize, usize)>,
}

impl Captioner {
    /// Checkpoint holding the model under `meta.model` and the parameters as
    /// `param/<name>`, merged with caller-supplied metadata and tensors.
    pub fn to_checkpoint(&self, extra_meta: serde_json::Value, extra_tensors: Vec<(String, Tensor)>) -> Result<Checkpoint> {
        let prototypes = self
            .prototype_params()
            .map(|(l, id)| {
                let s = self.params().get(id).tensor.shape();
                (l, s[0], s[1])
            })
            .collect();
        let model = ModelMeta {
            model: self.config().clone(),
            block_levels: self.block_levels().to_vec(),
            prototypes,
        };
        let mut meta = serde_json::Map::new();
        meta.insert("model".into(), serde_json::to_value(model)?);
        meta.insert("extra".into(), extra_meta);
        let mut tensors: Vec<(String, Tensor)> = self
            .params()
            .iter()
            .map(|(_, p)| (format!("{PARAM_PREFIX}{}", p.name), p.tensor.clone()))
            .collect();
        tensors.extend(extra_tensors);
        Ok(Checkpoint {
            meta: serde_json::Value::Object(meta),
            tensors,
        })
    }

    /// Rebuilds the model stored in a checkpoint. Shapes must match what the
    /// stored configuration implies.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(
            ckpt.meta
                .get("model")
                .cloned()
                .ok_or_else(|| Error::data("checkpoint has no model metadata"))?,
        )?;
        let protos: BTreeMap<usize, Tensor> = meta
            .prototypes
            .iter()
            .map(|&(l, r, c)| (l, Tensor::zeros(&[r, c])))
            .collect();
        let mut model = Captioner::build(meta.model, meta.block_levels, protos)?;
        let values: Vec<(String, Tensor)> = ckpt
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(PARAM_PREFIX).map(|s| (s.to_string(), t.clone())))
            .collect();
        model.load_values(&values)?;
        Ok(model)
    }
}
