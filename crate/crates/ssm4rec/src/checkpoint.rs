//! Binary container for named f32 tensors, used for model checkpoints and
//! the prepared-dataset cache.
//!
//! Layout: 8-byte magic "SSM4REC1", u64 tensor count, then per tensor a u64
//! name length, the UTF-8 name, a u64 rank, the extents as u64s, and the
//! payload as little-endian f32 words. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SSM4REC1";

/// Caps for a sanity check while reading; corrupt headers fail fast instead
/// of attempting a huge allocation.
const MAX_TENSORS: u64 = 1 << 20;
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 8;
const MAX_NUMEL: u64 = 1 << 31;

pub fn write_tensors(path: &Path, items: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(items.len() as u64).to_le_bytes())?;
    for (name, t) in items {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("container truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("container truncated".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}; not a tensor container",
            magic
        )));
    }
    let count = read_u64(&mut r)?;
    if count > MAX_TENSORS {
        return Err(Error::Format(format!("implausible tensor count {count}")));
    }
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r)?;
        if name_len > MAX_NAME {
            return Err(Error::Format(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes)
            .map_err(|_| Error::Format("container truncated".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1u64;
        for _ in 0..rank {
            let e = read_u64(&mut r)?;
            numel = numel.saturating_mul(e.max(1));
            shape.push(e as usize);
        }
        if numel > MAX_NUMEL {
            return Err(Error::Format(format!("implausible tensor size {numel}")));
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        for v in &mut data {
            let mut buf = [0u8; 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Format("container truncated".into()))?;
            *v = f32::from_le_bytes(buf);
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(out)
}

pub fn save_model(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    write_tensors(path, &params.tensors())
}

/// Loads a checkpoint into the shape dictated by `cfg`; every expected
/// tensor must be present with matching extents, and nothing extra.
pub fn load_model(path: &Path, cfg: &ModelConfig) -> Result<ModelParams<f32>> {
    let stored = read_tensors(path)?;
    let mut params = ModelParams::<f32>::init(cfg, &mut crate::rng::Rng::new(0))?;
    let expected = params.tensors().len();
    if stored.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, config expects {}",
            stored.len(),
            expected
        )));
    }
    let mut by_name: std::collections::HashMap<String, Tensor<f32>> =
        stored.into_iter().collect();
    for (name, slot) in params.tensors_mut() {
        let t = by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?}, config expects {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(params)
}
