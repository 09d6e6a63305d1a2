//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! `COCONCKPT`, `u32` version, `u64` length + UTF-8 JSON metadata, `u64`
//! record count, then per parameter: `u32` length + UTF-8 path, `u32` rank,
//! `u64` per dimension, raw `f64` values. Records are in path order, so
//! saving a loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::LMConfig;
use crate::tensor::{ParameterStore, Tensor};
use crate::trainer::TrainerConfig;

const MAGIC: &[u8; 9] = b"COCONCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub lm: LMConfig,
    #[serde(default)]
    pub trainer: Option<TrainerConfig>,
    /// Parameter groups that were frozen when saved.
    #[serde(default)]
    pub frozen: Vec<String>,
}

impl CheckpointMeta {
    pub fn new(lm: LMConfig) -> Self {
        CheckpointMeta {
            lm,
            trainer: None,
            frozen: Vec::new(),
        }
    }
}

pub fn to_bytes(meta: &CheckpointMeta, store: &ParameterStore) -> Result<Vec<u8>> {
    let mut meta = meta.clone();
    meta.frozen = store.frozen_groups().map(str::to_string).collect();
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(store.num_scalars(None) * 8 + json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (path, p) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            what: "checkpoint",
            detail: format!("truncated at byte {}", self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format {
            what: "checkpoint",
            detail: "length does not fit in memory".into(),
        })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(CheckpointMeta, ParameterStore)> {
    let bad = |detail: String| Error::Format { what: "checkpoint", detail };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(bad("missing COCONCKPT magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let json_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
    let count = r.len()?;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let path_len = r.u32()? as usize;
        let path = std::str::from_utf8(r.take(path_len)?)
            .map_err(|_| bad("parameter path is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("shape overflows".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("shape overflows".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(path, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for g in &meta.frozen {
        store.freeze_group(g);
    }
    Ok((meta, store))
}

pub fn save(path: &Path, meta: &CheckpointMeta, store: &ParameterStore) -> Result<()> {
    let bytes = to_bytes(meta, store)?;
    // Write then rename so readers never observe a partial file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ParameterStore)> {
    from_bytes(&std::fs::read(path)?)
}
