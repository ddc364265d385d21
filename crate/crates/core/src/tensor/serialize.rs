//! `PSPTENS1` binary container: 8-byte magic, little-endian `u32` rank,
//! `u64` dims, then the little-endian `f64` payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::Tensor;
use crate::error::{PspError, Result};

pub const MAGIC: &[u8; 8] = b"PSPTENS1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: &str| PspError::Container {
        path: origin.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing PSPTENS1 magic"));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = 12 + 8 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(bytes[12 + 8 * i..20 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(bad(&format!(
            "payload is {} bytes, expected {} for shape {shape:?}",
            bytes.len() - header,
            8 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn save(t: &Tensor, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| PspError::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| PspError::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| PspError::io(path, e))?;
    decode(&bytes, path)
}
