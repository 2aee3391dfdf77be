//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! "PCPM" u32 version
//! params:    u64 count, count x tensor
//! optimizer: u64 step, u64 count, count x tensor (first moments),
//!            u64 count, count x tensor (second moments)
//! rng:       32-byte seed, u64 stream, u128 word position
//! config:    u64 length, JSON bytes
//! tensor:    u16 name length, name, u8 rank, rank x u64 dim, f32 data
//! ```

use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::PcpMae;
use crate::scalar::Scalar;
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 4] = b"PCPM";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken.
    pub step: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub first: Vec<(String, Tensor<f32>)>,
    pub second: Vec<(String, Tensor<f32>)>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_tensors(&mut out, &self.params);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_tensors(&mut out, &self.first);
        write_tensors(&mut out, &self.second);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format(format!(
                "bad magic, expected {:?}",
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let params = r.tensors()?;
        let step = r.u64()?;
        let first = r.tensors()?;
        let second = r.tensors()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let len = r.u64()? as usize;
        let config = serde_json::from_slice(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            first,
            second,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies the stored parameters into `model` by name.
    pub fn load_params<T: Scalar>(&self, model: &mut PcpMae<T>) -> Result<()> {
        if self.params.len() != model.store.len() {
            return Err(Error::Format(format!(
                "{} tensors in checkpoint, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = model
                .store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
            let dst = model.store.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?} vs model {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.cast();
        }
        Ok(())
    }

    /// Builds the checkpoint's model in precision `T`.
    pub fn model<T: Scalar>(&self) -> Result<PcpMae<T>> {
        let mut model = PcpMae::new(self.config.model.clone(), self.config.train.seed)?;
        self.load_params(&mut model)?;
        Ok(model)
    }
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor<f32>)]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let count = self.u64()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
