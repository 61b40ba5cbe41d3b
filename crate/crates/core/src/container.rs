//! Fixed-layout little-endian tensor container.
//!
//! ```text
//! "APFT" | version: u16 | ndim: u16 | dims: ndim x u64 | dtype: u8 | zero pad to 8 | payload
//! ```
//!
//! Only dtype 1 (`f32`) exists. Readers reject unknown magic, version or
//! dtype, and any payload whose length disagrees with the dims.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"APFT";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} describe {n} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("{} dims exceed the header", dims.len())));
        }
        Ok(Self { dims, data })
    }
}

fn header_len(ndim: usize) -> usize {
    let raw = 4 + 2 + 2 + 8 * ndim + 1;
    raw.div_ceil(8) * 8
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let hl = header_len(t.dims.len());
    let mut out = Vec::with_capacity(hl + 4 * t.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u16).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    out.resize(hl, 0);
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let short = || Error::Format("truncated header".into());
    if bytes.len() < 8 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let hl = header_len(ndim);
    if bytes.len() < hl {
        return Err(short());
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 8 + 8 * i;
        let d = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| Error::Format(format!("dim {d} too large")))?);
    }
    let dtype = bytes[8 + 8 * ndim];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unknown dtype tag {dtype}")));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let payload = &bytes[hl..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(Error::Format(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            payload.len(),
            n.saturating_mul(4)
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}
