//! Checkpoint retention for training trajectories.
//!
//! Spill file layout (`ckpt_{t:06}.bin`): magic `OCDSPAR1`, `u64` LE parameter
//! count, then that many `f64` LE values.

use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;

use crate::error::{Error, Result};
use crate::linalg::ParamVector;

pub const PARAM_MAGIC: &[u8; 8] = b"OCDSPAR1";

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:06}.bin")
}

pub fn encode_params(theta: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * theta.len());
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for x in theta {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamVector> {
    if bytes.len() < 16 || &bytes[..8] != PARAM_MAGIC {
        return Err(Error::format(path, "missing OCDSPAR1 header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 8 * n {
        return Err(Error::format(
            path,
            format!("expected {n} parameters, found {} bytes", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .into())
}

pub fn write_checkpoint(path: &Path, theta: &[f64]) -> Result<()> {
    fs::write(path, encode_params(theta)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamVector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}

/// When to keep checkpoints in memory and where to spill them otherwise.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    /// Spill once `(T + 1) * N * 8` bytes would exceed this. `None` keeps
    /// everything in memory.
    pub memory_budget_bytes: Option<usize>,
    /// Spill directory; a temporary directory is used when unset.
    pub spill_dir: Option<PathBuf>,
}

impl CheckpointPolicy {
    pub fn in_memory() -> Self {
        CheckpointPolicy::default()
    }

    pub fn spill_to(dir: impl Into<PathBuf>) -> Self {
        CheckpointPolicy {
            memory_budget_bytes: Some(0),
            spill_dir: Some(dir.into()),
        }
    }

    pub(crate) fn should_spill(&self, checkpoints: usize, params: usize) -> bool {
        match self.memory_budget_bytes {
            Some(budget) => checkpoints.saturating_mul(params).saturating_mul(8) > budget,
            None => false,
        }
    }
}

#[derive(Debug)]
pub(crate) struct DiskStore {
    dir: PathBuf,
    _temp: Option<TempDir>,
    count: usize,
}

#[derive(Debug)]
pub(crate) enum CheckpointStore {
    Memory(Vec<ParamVector>),
    Disk(DiskStore),
}

impl CheckpointStore {
    pub(crate) fn new(policy: &CheckpointPolicy, checkpoints: usize, params: usize) -> Result<Self> {
        if !policy.should_spill(checkpoints, params) {
            return Ok(CheckpointStore::Memory(Vec::with_capacity(checkpoints)));
        }
        let (dir, temp) = match &policy.spill_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                (d.clone(), None)
            }
            None => {
                let t = tempfile::Builder::new()
                    .prefix("ocds-ckpt")
                    .tempdir()
                    .map_err(|e| Error::io(std::env::temp_dir(), e))?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        Ok(CheckpointStore::Disk(DiskStore {
            dir,
            _temp: temp,
            count: 0,
        }))
    }

    pub(crate) fn push(&mut self, theta: ParamVector) -> Result<()> {
        match self {
            CheckpointStore::Memory(v) => v.push(theta),
            CheckpointStore::Disk(d) => {
                write_checkpoint(&d.dir.join(checkpoint_file_name(d.count)), &theta)?;
                d.count += 1;
            }
        }
        Ok(())
    }

    pub(crate) fn len(&self) -> usize {
        match self {
            CheckpointStore::Memory(v) => v.len(),
            CheckpointStore::Disk(d) => d.count,
        }
    }

    pub(crate) fn get(&self, t: usize) -> Result<ParamVector> {
        if t >= self.len() {
            return Err(Error::config(format!(
                "checkpoint {t} out of range ({} stored)",
                self.len()
            )));
        }
        match self {
            CheckpointStore::Memory(v) => Ok(v[t].clone()),
            CheckpointStore::Disk(d) => read_checkpoint(&d.dir.join(checkpoint_file_name(t))),
        }
    }

    pub(crate) fn is_spilled(&self) -> bool {
        matches!(self, CheckpointStore::Disk(_))
    }
}
