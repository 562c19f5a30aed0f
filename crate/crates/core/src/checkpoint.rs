//! Binary checkpoints: every parameter as f32, the config text and the
//! optimizer step counter.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "M2CK" | u32 version | u32 tensor count
//! per tensor: u16 name length | name | u8 dtype (0 = f32) | u8 rank | u64 dims… | f32 payload
//! u32 config length | config text | u64 step
//! ```

use std::path::Path;

use m2clip_autograd::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"M2CK";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn format(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<TensorRecord>,
    pub config_text: String,
    pub step: u64,
}

impl Checkpoint {
    /// Snapshot of every parameter, frozen ones included, in registration order.
    pub fn from_model(model: &Model, step: u64) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, p)| TensorRecord {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            tensors,
            config_text: model.config.to_text(),
            step,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(u32::try_from(self.tensors.len()).map_err(|_| format("too many tensors"))?.to_le_bytes());
        for t in &self.tensors {
            let name = u16::try_from(t.name.len()).map_err(|_| format(format!("tensor name too long: {}", t.name)))?;
            out.extend(name.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(u8::try_from(t.shape.len()).map_err(|_| format(format!("rank too large: {}", t.name)))?);
            for &d in &t.shape {
                out.extend((d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend(v.to_le_bytes());
            }
        }
        let cfg = u32::try_from(self.config_text.len()).map_err(|_| format("config text too long"))?;
        out.extend(cfg.to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend(self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format("bad magic, not an M2CK checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format(format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| format(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(format(format!("tensor {name}: unknown dtype tag {dtype}")));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64("dimension")?).map_err(|_| format("dimension overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| format(format!("tensor {name}: size overflow")))?;
            let raw = r.take(n, "tensor payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        let len = r.u32("config length")? as usize;
        let config_text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|_| format("config text is not UTF-8"))?
            .to_string();
        let step = r.u64("step counter")?;
        if r.pos != bytes.len() {
            return Err(format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            tensors,
            config_text,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config(&self) -> Result<Config> {
        let (cfg, _) = Config::parse_str(&self.config_text)?;
        Ok(cfg)
    }

    /// Copies the stored values into `model`. Every model parameter must be
    /// present with the same shape.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            return Err(format(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for t in &self.tensors {
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| format(format!("unknown tensor {}", t.name)))?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != t.shape.as_slice() {
                return Err(format(format!(
                    "shape mismatch for {}: checkpoint {:?}, model {:?}",
                    t.name,
                    t.shape,
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| f64::from(v)).collect())?;
        }
        Ok(())
    }

    /// Rebuilds the model from the stored config, then loads the values.
    pub fn into_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config()?)?;
        self.apply(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, step: u64, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, step).save(path)
}

/// Loads a checkpoint and the model it describes, with its step counter.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, u64)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.into_model()?, ck.step))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
