//! Binary checkpoint format.
//!
//! ```text
//! "SGMF"  u32 version  u32 tensor count
//! per tensor: u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64),
//!             u32 rank, u64 extents, little-endian payload
//! u64 step  [u8; 32] SHA-256 of the config text  u32 config length, config text
//! ```
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layers::ParamRegistry;
use crate::network::FusionNet;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SGMF";
pub const VERSION: u32 = 1;

/// A tensor as stored, in its own precision.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Convert to `T`, rounding if the stored precision differs.
    pub fn to<T: Element>(&self) -> Tensor<T> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        }
    }

    fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
    pub step: u64,
    pub config_text: String,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
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
            .ok_or_else(|| fmt_err(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn tensor<T: Element>(&mut self, shape: Vec<usize>) -> Result<Tensor<T>> {
        let count: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let bytes = self.take(count.checked_mul(size).ok_or_else(|| fmt_err("tensor too large"))?)?;
        let data = bytes.chunks_exact(size).map(T::read_le).collect();
        Tensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn from_net<T: Element>(net: &FusionNet<T>, step: u64, config: &TrainConfig) -> Self {
        Checkpoint {
            tensors: net
                .params()
                .iter()
                .map(|(name, t)| (name.to_string(), StoredTensor::from_tensor(t)))
                .collect(),
            step,
            config_text: config.to_text(),
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_text(&self.config_text)
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn registry<T: Element>(&self) -> Result<ParamRegistry<T>> {
        let mut reg = ParamRegistry::new();
        for (name, t) in &self.tensors {
            reg.insert(name.clone(), t.to())?;
        }
        Ok(reg)
    }

    /// Rebuild the network described by the stored config.
    pub fn to_net<T: Element>(&self) -> Result<FusionNet<T>> {
        FusionNet::from_params(self.config()?.net_config(), self.registry()?)
    }

    /// Copy the stored parameters into `net`, which must have exactly the
    /// same names and shapes.
    pub fn load_into<T: Element>(&self, net: &mut FusionNet<T>) -> Result<()> {
        let reg = net.params_mut();
        if reg.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint holds {} tensors, network has {}",
                self.tensors.len(),
                reg.len()
            )));
        }
        for (name, t) in &self.tensors {
            match reg.get(name) {
                Some(cur) if cur.shape() == t.shape() => {}
                Some(cur) => {
                    return Err(Error::ShapeMismatch {
                        op: "load checkpoint",
                        lhs: cur.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None => return Err(Error::UnknownParameter(name.clone())),
            }
        }
        for (name, t) in &self.tensors {
            reg.set(name, t.to())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.param_count() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match t {
                StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.digest());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {}", version)));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?
                .to_string();
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| fmt_err(format!("unknown dtype for `{}`", name)))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let t = match dtype {
                DType::F32 => StoredTensor::F32(r.tensor(shape)?),
                DType::F64 => StoredTensor::F64(r.tensor(shape)?),
            };
            tensors.push((name, t));
        }
        let step = r.u64()?;
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u32()? as usize;
        let config_text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| fmt_err("config text is not UTF-8"))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint {
            tensors,
            step,
            config_text,
        };
        if ckpt.digest() != digest {
            return Err(fmt_err("config digest does not match config text"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
