//! Versioned binary checkpoints: a shape header per tensor followed by
//! little-endian f64 data.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::moe::model::Model;

const MAGIC: &[u8; 8] = b"ACMOECKP";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let tensors = model.named_tensors();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, rows, cols, data) in &tensors {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(*rows as u64).to_le_bytes());
        buf.extend_from_slice(&(*cols as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let b = read_exact_buf(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

/// Loads a checkpoint into a model of matching architecture. Every tensor
/// must match by name and shape.
pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<()> {
    let mut file = std::fs::File::open(path)?;
    let magic = read_exact_buf(&mut file, 8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut file)? as usize;
    let mut loaded: Vec<(String, usize, usize, Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut file)? as usize;
        let name = String::from_utf8(read_exact_buf(&mut file, name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let rows = read_u64(&mut file)? as usize;
        let cols = read_u64(&mut file)? as usize;
        let raw = read_exact_buf(&mut file, rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push((name, rows, cols, data));
    }

    let expected = model.named_tensors();
    if loaded.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, model has {}",
            loaded.len(),
            expected.len()
        )));
    }
    let mut flat = Vec::with_capacity(model.num_params());
    for ((name, rows, cols, data), (e_name, e_rows, e_cols, _)) in
        loaded.iter().zip(expected.iter())
    {
        if name != e_name || rows != e_rows || cols != e_cols {
            return Err(Error::Checkpoint(format!(
                "tensor {name} ({rows}x{cols}) does not match model tensor {e_name} ({e_rows}x{e_cols})"
            )));
        }
        flat.extend_from_slice(data);
    }
    model.load_params_flat(&flat)
}
