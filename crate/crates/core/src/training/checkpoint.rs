//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SACK`, `u32` header length, JSON header,
//! `u32` blob count, then per blob: `u32` name length, UTF-8 name, `u8`
//! dtype code, `u32` rank, `u64` per dimension, `u64` byte length, raw data.

use std::collections::BTreeMap;
use std::path::Path;

use semattn_nn::{read_le, DType, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SceneNet};
use crate::util::atomic_write;

const MAGIC: &[u8; 4] = b"SACK";
pub const FORMAT_VERSION: u32 = 1;
/// Name prefix of optimizer state blobs.
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub stage: Stage,
    /// Completed epochs.
    pub epoch: usize,
    /// Every random stream is derived from this seed and the epoch.
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn from_values<T: Scalar>(shape: Vec<usize>, values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size());
        T::write_le(values, &mut bytes);
        Self {
            dtype: T::DTYPE,
            shape,
            bytes,
        }
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        read_le(self.dtype, &self.bytes)
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Header plus named tensors: parameters, normalization buffers and
/// optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: BTreeMap<String, Blob>,
}

impl Checkpoint {
    /// Snapshot the parameters and buffers of `components`.
    pub fn capture<T: Scalar>(model: &mut SceneNet<T>, components: &[&str], header: CheckpointHeader) -> Self {
        let mut blobs = BTreeMap::new();
        model.visit_params_of(components, &mut |name, p| {
            blobs.insert(name.to_string(), Blob::from_values(p.shape.clone(), &p.value));
        });
        model.visit_buffers_of(components, &mut |name, b| {
            blobs.insert(name.to_string(), Blob::from_values(b.shape.clone(), &b.value));
        });
        Self { header, blobs }
    }

    /// Overwrite the parameters and buffers of `components` from this checkpoint.
    pub fn restore<T: Scalar>(&self, model: &mut SceneNet<T>, components: &[&str]) -> Result<()> {
        let mut err = None;
        let mut load = |name: &str, shape: &[usize], dst: &mut Vec<T>| {
            if err.is_some() {
                return;
            }
            match self.blobs.get(name) {
                None => err = Some(Error::Format(format!("checkpoint has no tensor `{name}`"))),
                Some(b) if b.shape != shape => {
                    err = Some(Error::shape(format!("checkpoint tensor `{name}`"), format!("{shape:?}"), format!("{:?}", b.shape)))
                }
                Some(b) => *dst = b.values(),
            }
        };
        model.visit_params_of(components, &mut |name, p| load(name, &p.shape.clone(), &mut p.value));
        model.visit_buffers_of(components, &mut |name, b| load(name, &b.shape.clone(), &mut b.value));
        err.map_or(Ok(()), Err)
    }

    /// SHA-256 over the name-sorted blobs whose names start with one of `prefixes`.
    pub fn digest(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, blob) in &self.blobs {
            if matches_component(name, prefixes) {
                h.update(name.as_bytes());
                h.update(&blob.bytes);
            }
        }
        hex(&h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, b) in &self.blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(b.dtype.code());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&b.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let count = r.u32()?;
        let mut blobs = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            if len != shape.iter().product::<usize>() * dtype.size() {
                return Err(Error::Format(format!("blob `{name}` length {len} disagrees with shape {shape:?}")));
            }
            let data = r.take(len)?.to_vec();
            blobs.insert(
                name,
                Blob {
                    dtype,
                    shape,
                    bytes: data,
                },
            );
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint blobs".into()));
        }
        Ok(Self { header, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// SHA-256 over the name-sorted parameters and buffers of `components`,
/// comparable with [`Checkpoint::digest`].
pub fn model_digest<T: Scalar>(model: &mut SceneNet<T>, components: &[&str]) -> String {
    let snapshot = Checkpoint::capture(
        model,
        components,
        CheckpointHeader {
            format_version: FORMAT_VERSION,
            model_config: model.config.clone(),
            stage: Stage::Fusion,
            epoch: 0,
            seed: 0,
            train_config: None,
        },
    );
    snapshot.digest(components)
}

fn matches_component(name: &str, prefixes: &[&str]) -> bool {
    prefixes
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
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
}
