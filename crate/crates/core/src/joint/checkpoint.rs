//! Self-describing checkpoint file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "JDIF" | u32 version | u32 header_len | header (JSON, UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 rank | u32 dims[rank] | f32 values[prod(dims)]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AgeRange, Schedules};
use crate::denoiser::{DenoiserConfig, Params};
use crate::error::{Error, Result};
use crate::schedule::{DiscreteScheduleSpec, GaussianScheduleSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"JDIF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub gaussian: GaussianScheduleSpec,
    pub discrete: DiscreteScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub age_range: AgeRange,
    /// Epoch whose parameters are stored (1-based).
    pub epoch: usize,
    pub validation_loss: f64,
    pub initial_validation_loss: f64,
    /// Validation loss after every epoch, in order.
    pub validation_history: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f32>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    pub fn schedules(&self) -> Result<Schedules> {
        Schedules::from_specs(&self.header.gaussian, &self.header.discrete)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| Error::Format(format!("header: {e}")))?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(*d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_bytes(r, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = read_u32(r)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(&read_bytes(r, hlen)?)
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let count = read_u32(r)?;
        let mut params = Params::default();
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, nlen)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u32(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name, Tensor::new(shape, data)?)?;
        }
        Ok(Self { header, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
