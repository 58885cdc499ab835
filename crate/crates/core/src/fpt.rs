//! `FPT1` raw tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"FPT1" | u32 version = 1 | u32 rank | u32 dims[rank] | u8 dtype (0 = f32) | f32 payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::NdTensor;

pub const MAGIC: &[u8; 4] = b"FPT1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn write<W: Write>(mut w: W, tensor: &NdTensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<NdTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FPT version {version}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            dtype[0]
        )));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    NdTensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn to_bytes(tensor: &NdTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * tensor.rank() + 4 * tensor.len());
    write(&mut out, tensor).expect("writing to a Vec cannot fail");
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<NdTensor> {
    let mut cursor = bytes;
    let t = read(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
    }
    Ok(t)
}

pub fn save(path: impl AsRef<Path>, tensor: &NdTensor) -> Result<()> {
    fs::write(path, to_bytes(tensor))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<NdTensor> {
    from_bytes(&fs::read(path)?)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
