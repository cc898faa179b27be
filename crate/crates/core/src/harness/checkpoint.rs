//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `DMPSCKPT`, `u32` version, `u64` model hash, `u32` length plus the
//! run configuration as TOML, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u64` rows, `u64` cols and `rows * cols`
//! `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::blocks::DmpsModel;
use crate::error::{DmpsError, Result};
use crate::tensor::Tensor;

use super::config::RunConfig;

const MAGIC: &[u8; 8] = b"DMPSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<DmpsModel> {
        DmpsModel::for_params(&self.config.model, &self.params)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| DmpsError::Checkpoint("string too long".into()))?;
    put_u32(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(config: &RunConfig, params: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u64(&mut out, config.model_hash()?);
    put_str(&mut out, &config.to_toml()?)?;
    put_u32(&mut out, params.len() as u32);
    for (name, tensor) in params.iter() {
        put_str(&mut out, name)?;
        put_u64(&mut out, tensor.rows() as u64);
        put_u64(&mut out, tensor.cols() as u64);
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(DmpsError::Checkpoint("truncated file".into()));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| DmpsError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(DmpsError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DmpsError::Checkpoint(format!("unsupported version {version}")));
    }
    let hash = r.u64()?;
    let config = RunConfig::from_toml(&r.string()?)?;
    if config.model_hash()? != hash {
        return Err(DmpsError::Checkpoint("configuration hash mismatch".into()));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.bytes.len()))
            .ok_or_else(|| DmpsError::Checkpoint(format!("bad shape for {name}")))?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::from_vec(rows, cols, data)?)?;
    }
    if !r.bytes.is_empty() {
        return Err(DmpsError::Checkpoint("trailing bytes".into()));
    }
    DmpsModel::for_params(&config.model, &params)?;
    Ok(Checkpoint { config, params })
}

pub fn save(path: &Path, config: &RunConfig, params: &ParamStore) -> Result<()> {
    let bytes = encode(config, params)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Opens the file read-only; loading never modifies it.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
