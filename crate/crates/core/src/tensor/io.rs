//! Binary tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                       |
//! |--------------|-------------------------------|
//! | 4            | magic `CMDT`                  |
//! | 4            | format version (`u32`, = 1)   |
//! | 4            | rank (`u32`)                  |
//! | 4 · rank     | extents (`u32` each)          |
//! | 8 · numel    | values (`f64`, row-major)     |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{check_shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CMDT";
pub const VERSION: u32 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * tensor.shape().len() + 8 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let mut word = [0u8; 4];
    let mut read_u32 = |b: &mut &[u8]| -> Result<u32> {
        b.read_exact(&mut word)
            .map_err(|_| Error::Format("truncated header".into()))?;
        Ok(u32::from_le_bytes(word))
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    bytes = &bytes[4..];
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = read_u32(&mut bytes)? as usize;
    let shape = (0..rank)
        .map(|_| read_u32(&mut bytes).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = check_shape(&shape)?;
    if bytes.len() != 8 * len {
        return Err(Error::Format(format!(
            "expected {} value bytes, found {}",
            8 * len,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::from_vec(&shape, values)
}

pub fn write(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensor))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
