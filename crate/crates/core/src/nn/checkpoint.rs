//! Model checkpoint: a binary blob of named tensors plus `arch.json`.
//!
//! Blob layout, little endian: magic `MTHUCKPT`, `u32` version, `u32` tensor
//! count, then per tensor a `u32` name length, the UTF-8 name, a `u32` rank,
//! `u64` dims and the `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::model::{ArchitectureConfig, DataDims, ModelParameters, ModuleSwitches};
use super::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ARCH_FILE: &str = "arch.json";
const MAGIC: &[u8; 8] = b"MTHUCKPT";

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn format(path: &Path, msg: impl Into<String>) -> Error {
    Error::format(path, msg)
}

#[derive(Serialize, Deserialize)]
struct ArchFile {
    format_version: u32,
    arch: ArchitectureConfig,
    dims: DataDims,
    switches: ModuleSwitches,
}

/// Writes `model.ckpt` and `arch.json` into `dir`; returns the blob path.
pub fn save_checkpoint(dir: &Path, params: &ModelParameters, switches: &ModuleSwitches) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut buf = Vec::with_capacity(16 + params.count() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob = dir.join(CHECKPOINT_FILE);
    fs::write(&blob, buf).map_err(|e| io(&blob, e))?;
    let arch = ArchFile {
        format_version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        dims: params.dims,
        switches: *switches,
    };
    let path = dir.join(ARCH_FILE);
    fs::write(&path, serde_json::to_string_pretty(&arch)? + "\n").map_err(|e| io(&path, e))?;
    Ok(blob)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format(self.file, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParameters, ModuleSwitches)> {
    let path = dir.join(ARCH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    let arch: ArchFile = serde_json::from_str(&text).map_err(|e| format(&path, e.to_string()))?;
    if arch.format_version != CHECKPOINT_VERSION {
        return Err(format(&path, format!("unsupported checkpoint version {}", arch.format_version)));
    }
    let blob = dir.join(CHECKPOINT_FILE);
    let bytes = fs::read(&blob).map_err(|e| io(&blob, e))?;
    let mut r = Reader { buf: &bytes, pos: 0, file: &blob };
    if r.take(8)? != MAGIC {
        return Err(format(&blob, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format(&blob, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = IndexMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| format(&blob, "tensor name is not UTF-8"))?.to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n.checked_mul(8).ok_or_else(|| format(&blob, "tensor too large"))?)?;
        let data = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(format(&blob, "trailing bytes after the last tensor"));
    }
    let params = ModelParameters::from_parts(arch.arch, arch.dims, tensors).map_err(|e| match e {
        Error::Shape(m) | Error::Validation(m) => format(&blob, m),
        other => other,
    })?;
    Ok((params, arch.switches))
}
