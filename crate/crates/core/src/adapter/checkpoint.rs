//! Versioned checkpoint container.
//!
//! ```text
//! "LNCK" | u16 version | u16 flags | u32 header_len | JSON header | f32 LE values
//! ```
//!
//! The JSON header holds the adapter configuration, seed lineage, step
//! counter and the ordered list of tensor names and shapes; the values
//! follow in that order.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{AdapterModel, AdapterParams};
use super::AdapterConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LNCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Where a run's randomness came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedLineage {
    pub base_seed: u64,
    pub fold: Option<u64>,
    pub run_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AdapterModel,
    pub step: u64,
    pub epoch: u64,
    pub seeds: SeedLineage,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: AdapterConfig,
    step: u64,
    epoch: u64,
    seeds: SeedLineage,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    /// Parameters are written as `f32`; models kept on the `f32` grid (as
    /// training does) round-trip bit for bit.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let header = Header {
            config: self.model.config().clone(),
            step: self.step,
            epoch: self.epoch,
            seeds: self.seeds.clone(),
            tensors: params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * params.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, vals) in params.tensors() {
            for &v in vals {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| -> Result<()> {
            if bytes.len() < n {
                Err(Error::Truncated { expected: n as u64, found: bytes.len() as u64 })
            } else {
                Ok(())
            }
        };
        need(12)?;
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        need(12 + header_len)?;
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.config.validate()?;

        let mut params = AdapterParams::zeros(&header.config);
        let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected != header.tensors {
            return Err(Error::DimensionMismatch("checkpoint tensors do not match its configuration".into()));
        }
        let payload = &bytes[12 + header_len..];
        let count = params.len();
        need(12 + header_len + 4 * count)?;
        if payload.len() != 4 * count {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                4 * count
            )));
        }
        let mut values = payload.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().expect("length checked");
            }
        }
        let model =
            AdapterModel::from_params(header.config, params).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        Ok(Self { model, step: header.step, epoch: header.epoch, seeds: header.seeds })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Reference(format!("checkpoint {} not found", path.display())),
            _ => e.into(),
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
