//! Binary tensor container, used for checkpoint payloads and volume dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "GLRT"
//! version u32      1
//! dtype   u32      0 = f32 (the only dtype)
//! rank    u32
//! dims    rank * u32
//! data    prod(dims) * 4 bytes, row-major f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{GlrError, Result};

const MAGIC: &[u8; 4] = b"GLRT";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 0;
const MAX_RANK: usize = 8;
/// 1 GiB of f32 payload; anything larger is a corrupt header, not data.
const MAX_ELEMS: u64 = 1 << 28;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a tensor to the container layout.
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    let mut header = Vec::with_capacity(16 + 4 * t.dims().len());
    header.extend_from_slice(MAGIC);
    put_u32(&mut header, VERSION);
    put_u32(&mut header, DTYPE_F32);
    put_u32(&mut header, t.dims().len() as u32);
    for &d in t.dims() {
        if d > u32::MAX as usize {
            return Err(GlrError::Format(format!("dimension {d} exceeds u32 range")));
        }
        put_u32(&mut header, d as u32);
    }
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(4 * t.numel());
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Deserializes a tensor written by [`write_tensor`].
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GlrError::Format(format!(
            "bad magic {:?}, expected \"GLRT\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(GlrError::Format(format!("unsupported version {version}")));
    }
    let dtype = get_u32(r)?;
    if dtype != DTYPE_F32 {
        return Err(GlrError::Format(format!("unsupported dtype {dtype}")));
    }
    let rank = get_u32(r)? as usize;
    if rank > MAX_RANK {
        return Err(GlrError::Format(format!(
            "rank {rank} exceeds limit {MAX_RANK}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = get_u32(r)? as u64;
        numel = numel.saturating_mul(d.max(1));
        dims.push(d as usize);
    }
    if numel > MAX_ELEMS {
        return Err(GlrError::Format(format!(
            "element count {numel} exceeds limit {MAX_ELEMS}"
        )));
    }
    let total = dims.iter().product::<usize>();
    let mut bytes = vec![0u8; 4 * total];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}

/// Number of bytes [`write_tensor`] produces for a tensor of this shape.
pub fn tensor_nbytes(dims: &[usize]) -> usize {
    16 + 4 * dims.len() + 4 * dims.iter().product::<usize>()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            GlrError::MissingFile(path.display().to_string())
        } else {
            e.into()
        }
    })
}

/// Writes one tensor to a file.
pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

/// Reads one tensor from a file, requiring the file to end with it.
pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let mut r = BufReader::new(open(path)?);
    let t = read_tensor(&mut r)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(GlrError::Format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        )));
    }
    Ok(t)
}
