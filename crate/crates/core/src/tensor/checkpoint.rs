//! Versioned little-endian checkpoint of ordered `(name, shape, f32 data)` records.
//!
//! ```text
//! magic "MF2SFCKP" | u16 version | u32 record count
//! per record: u16 name length | utf-8 name | u8 rank | rank × u32 dims | numel × f32
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::scalar::Scalar;

use super::{numel, NamedTensor, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MF2SFCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Malformed("truncated".into())
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Scalar, W: Write>(w: &mut W, params: &ParamSet<T>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params.iter() {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| CheckpointError::Malformed("name too long".into()))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(u8::try_from(t.shape.len()).map_err(|_| CheckpointError::Malformed("rank too large".into()))?);
        for d in &t.shape {
            let d = u32::try_from(*d).map_err(|_| CheckpointError::Malformed("dimension too large".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<ParamSet<f32>, CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u16(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(r)? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank)?;
        let shape = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
        // read incrementally so a corrupted shape cannot force a huge allocation up front
        let mut data = Vec::new();
        let mut chunk = [0u8; 4];
        for _ in 0..n {
            read_exact(r, &mut chunk)?;
            data.push(f32::from_le_bytes(chunk));
        }
        debug_assert_eq!(numel(&shape), data.len());
        tensors.push(NamedTensor { name, shape, data });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(ParamSet::new(tensors))
}
