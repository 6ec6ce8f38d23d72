//! `HPT1` tensor dump: magic `HPT1`, u32 rank, u32 dims, f32 payload, all
//! little-endian and row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"HPT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor; `origin` is used in error messages.
pub fn read_tensor<R: Read>(r: &mut R, origin: &Path) -> Result<Tensor<f32>> {
    let bad = |m: String| Error::format(origin, m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(origin, e))?;
    if &magic != TENSOR_MAGIC {
        return Err(bad(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r).map_err(|e| Error::io(origin, e))? as usize;
    if rank == 0 || rank > 8 {
        return Err(bad(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(|e| Error::io(origin, e))? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes).map_err(|e| Error::io(origin, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f), path)
}
