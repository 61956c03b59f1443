//! Named-tensor checkpoints.
//!
//! Layout (little-endian): magic `SLCACP01`, `u32` tensor count, then per
//! tensor `u32` name length, UTF-8 name, `u8` dtype (0 = f32, 1 = f64), `u8`
//! rank and `u32` dims; then every tensor's raw bytes in manifest order; then
//! the `u64` FNV-1a of that payload.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::digest::fnv1a;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Module, Scalar};

pub const MAGIC: &[u8; 8] = b"SLCACP01";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

fn dtype_width(dtype: u8) -> Result<usize> {
    match dtype {
        0 => Ok(4),
        1 => Ok(8),
        d => Err(Error::Format(format!("unknown dtype code {d}"))),
    }
}

impl TensorRecord {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values widened to `f64` (exact for both dtypes).
    pub fn values_f64(&self) -> Vec<f64> {
        match self.dtype {
            0 => self.bytes.chunks_exact(4).map(|b| f32::read_le(b) as f64).collect(),
            _ => self.bytes.chunks_exact(8).map(f64::read_le).collect(),
        }
    }

    fn values<T: Scalar>(&self) -> Vec<T> {
        if self.dtype == T::DTYPE {
            self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect()
        } else {
            self.values_f64().into_iter().map(T::of).collect()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Checkpoint {
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Every tensor of `module` (trainable, frozen and running statistics).
    pub fn from_module<T: Scalar>(module: &dyn Module<T>) -> Self {
        let mut tensors = Vec::new();
        module.visit("", &mut |name, p| {
            let mut bytes = Vec::with_capacity(p.len() * T::BYTES);
            for &v in &p.value {
                v.write_le(&mut bytes);
            }
            tensors.push(TensorRecord { name: name.to_string(), dtype: T::DTYPE, shape: p.shape.clone(), bytes });
        });
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
            if t.shape.len() > u8::MAX as usize || t.bytes.len() != t.numel() * dtype_width(t.dtype)? {
                return Err(Error::Format(format!("tensor {:?} has inconsistent shape or size", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        let start = out.len();
        for t in &self.tensors {
            out.extend_from_slice(&t.bytes);
        }
        let sum = fnv1a(&out[start..]);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let count = r.u32()? as usize;
        let mut names = HashSet::new();
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name {name:?}")));
            }
            let dtype = r.take(1)?[0];
            dtype_width(dtype)?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, dtype, shape));
        }
        let payload_start = r.pos;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, dtype, shape) in manifest {
            let n = shape.iter().product::<usize>() * dtype_width(dtype)?;
            let data = r.take(n)?.to_vec();
            tensors.push(TensorRecord { name, dtype, shape, bytes: data });
        }
        let payload_end = r.pos;
        let stored = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
        }
        if fnv1a(&bytes[payload_start..payload_end]) != stored {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every tensor into `module` by name. The checkpoint must cover
    /// exactly the module's tensors with matching shapes.
    pub fn load_into<T: Scalar>(&self, module: &mut dyn Module<T>) -> Result<()> {
        let by_name: BTreeMap<&str, &TensorRecord> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut seen = 0usize;
        let mut err = None;
        module.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match by_name.get(name) {
                Some(t) if t.shape == p.shape => {
                    p.value = t.values();
                    seen += 1;
                }
                Some(t) => {
                    err = Some(Error::Format(format!("tensor {name:?}: shape {:?} != expected {:?}", t.shape, p.shape)))
                }
                None => err = Some(Error::Format(format!("checkpoint lacks tensor {name:?}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors the model does not",
                self.tensors.len() - seen
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint<T: Scalar>(module: &dyn Module<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_module(module).save(path)
}

pub fn load_checkpoint<T: Scalar>(module: &mut dyn Module<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::load(path)?.load_into(module)
}

/// Encoder weights from a checkpoint of the encoder alone, frozen on return.
pub fn load_encoder<T: Scalar>(cfg: &EncoderConfig, path: impl AsRef<Path>) -> Result<Encoder<T>> {
    let mut enc = Encoder::build(cfg)?;
    load_checkpoint(&mut enc, path)?;
    enc.freeze();
    Ok(enc)
}
