//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "EPLCKPT1"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON: {"model": ModelConfig, "step": u64, "meta": any}
//! n_tensors    u64
//! per tensor:
//!   name_len   u32, name bytes (UTF-8)
//!   ndim       u32, ndim x u64 dims
//!   data       prod(dims) x f64, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layout, ModelConfig, ModelError, TinyModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EPLCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    step: u64,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: TinyModelParams,
    pub step: u64,
    /// Free-form metadata; the CLI stores the resolved run config here.
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut out: W, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let header = Header { model: ckpt.params.config.clone(), step: ckpt.step, meta: ckpt.meta.clone() };
    let header = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let layout = &ckpt.params.layout;
    out.write_all(&(layout.tensors.len() as u64).to_le_bytes())?;
    for t in &layout.tensors {
        out.write_all(&(t.name.len() as u32).to_le_bytes())?;
        out.write_all(t.name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in &ckpt.params.data[t.range()] {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Checkpoint, ModelError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let header_len = read_u64(&mut input)? as usize;
    if header_len > 1 << 24 {
        return Err(bad("header too large"));
    }
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| bad(e.to_string()))?;
    header.model.validate()?;
    let layout = Layout::new(&header.model);
    let n = read_u64(&mut input)? as usize;
    if n != layout.tensors.len() {
        return Err(bad(format!("expected {} tensors, found {n}", layout.tensors.len())));
    }
    let mut data = vec![0.0; layout.total];
    for spec in &layout.tensors {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        if name != spec.name.as_bytes() {
            return Err(bad(format!("expected tensor '{}', found '{}'", spec.name, String::from_utf8_lossy(&name))));
        }
        let ndim = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut input)? as usize);
        }
        if shape != spec.shape {
            return Err(bad(format!("tensor '{}' has shape {shape:?}, expected {:?}", spec.name, spec.shape)));
        }
        let mut buf = [0u8; 8];
        for x in &mut data[spec.range()] {
            input.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        params: TinyModelParams { config: header.model, layout, data },
        step: header.step,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
