//! Binary checkpoint format.
//!
//! ```text
//! "DMRK" | u32 version
//! u32 redundancy | u32 watermark_size | u8 invariance | u64 step
//! u32 tensor count, then per tensor:
//!     u32 name length | name (UTF-8) | u32 rank | u32 dims… | f32 values…
//! u8 has_adam, and if set:
//!     f64 lr | f64 beta1 | f64 beta2 | f64 epsilon | u64 adam step
//!     f32 first moments, then f32 second moments, in tensor order
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{ModelConfig, WatermarkingModel};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"DMRK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: WatermarkingModel,
    pub adam: Option<AdamState>,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: WatermarkingModel, adam: Option<AdamState>, step: u64) -> Self {
        Checkpoint { model, adam, step }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.model.config();
        out.extend_from_slice(&(cfg.redundancy as u32).to_le_bytes());
        out.extend_from_slice(&(cfg.watermark_size as u32).to_le_bytes());
        out.push(u8::from(cfg.invariance));
        out.extend_from_slice(&self.step.to_le_bytes());
        let store = self.model.params();
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for id in store.ids() {
            let name = store.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            let value = store.value(id);
            out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
            for &d in value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, value.data());
        }
        match &self.adam {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                let c = adam.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&adam.step.to_le_bytes());
                for m in adam.first.iter().chain(&adam.second) {
                    put_floats(&mut out, m);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let config = ModelConfig {
            redundancy: r.u32()? as usize,
            watermark_size: r.u32()? as usize,
            invariance: match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Checkpoint(format!("invalid invariance flag {v}"))),
            },
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("architecture header: {e}")))?;
        let step = r.u64()?;
        let mut model = WatermarkingModel::new(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.params().len() {
            return Err(Error::Checkpoint(format!(
                "{count} tensors stored, architecture has {}",
                model.params().len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let id = model
                .params()
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
            if seen[id.index()] {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            seen[id.index()] = true;
            let expected = model.params().value(id).shape().to_vec();
            if dims != expected {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {dims:?}, architecture expects {expected:?}"
                )));
            }
            let n = dims.iter().product();
            let values = r.floats(n)?;
            model.params_mut().set(id, Tensor::new(&dims, values)?)?;
        }
        let adam = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    epsilon: r.f64()?,
                };
                let adam_step = r.u64()?;
                let sizes: Vec<usize> = model.params().ids().map(|id| model.params().value(id).len()).collect();
                let first = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
                let second = sizes.iter().map(|&n| r.floats(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    config,
                    step: adam_step,
                    first,
                    second,
                })
            }
            v => return Err(Error::Checkpoint(format!("invalid optimizer flag {v}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { model, adam, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn put_floats(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
