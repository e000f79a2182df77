//! Versioned binary checkpoint format for named parameter tensors.
//!
//! Layout: 8-byte magic, u32 version, u64 parameter count, then per parameter
//! u32 name length + UTF-8 bytes, u32 rank, u64 extents, raw little-endian
//! f64 values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"SDIFCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let werr = |e| io_err(path, e);
    w.write_all(MAGIC).map_err(werr)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(werr)?;
    w.write_all(&(params.len() as u64).to_le_bytes()).map_err(werr)?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(werr)?;
        w.write_all(bytes).map_err(werr)?;
        let shape = t.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(werr)?;
        for e in shape {
            w.write_all(&(*e as u64).to_le_bytes()).map_err(werr)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(werr)?;
        }
    }
    w.flush().map_err(werr)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("missing header".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u64(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| CheckpointError::Corrupt("truncated parameter name".into()))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Corrupt(format!("truncated data for {name}")))?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("truncated u32".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Corrupt("truncated u64".into()))?;
    Ok(u64::from_le_bytes(buf))
}
