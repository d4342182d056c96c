//! Binary CSR cache.
//!
//! Layout, all little-endian: the magic `JSPM`, a `u32` version, `m`, `n` and
//! `nnz` as `u64`, then `row_ptr` (`m + 1` × `u64`), `col_indices`
//! (`nnz` × `u32`) and `vals` (`nnz` × IEEE-754 `f32`).

use std::io::{Read, Write};

use super::CsrMatrix;
use crate::error::{Error, Result};

pub const CACHE_MAGIC: [u8; 4] = *b"JSPM";
pub const CACHE_VERSION: u32 = 1;

pub fn write_csr_cache<W: Write>(a: &CsrMatrix, mut w: W) -> Result<()> {
    w.write_all(&CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    for v in [a.rows(), a.cols(), a.nnz()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(8 * (a.rows() + 1) + 8 * a.nnz());
    for &p in a.row_ptr() {
        buf.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for &c in a.col_indices() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for &v in a.vals() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_csr_cache<R: Read>(mut r: R) -> Result<CsrMatrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CACHE_MAGIC {
        return Err(Error::Cache(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {version}")));
    }
    let mut header = [0usize; 3];
    for h in &mut header {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *h = usize::try_from(u64::from_le_bytes(b))
            .map_err(|_| Error::Cache("dimension exceeds address space".into()))?;
    }
    let [m, n, nnz] = header;

    let mut read_vec = |count: usize, width: usize| -> Result<Vec<u8>> {
        let len = count.checked_mul(width).ok_or_else(|| Error::Cache("array length overflows".into()))?;
        let mut bytes = Vec::new();
        (&mut r).take(len as u64).read_to_end(&mut bytes)?;
        if bytes.len() != len {
            return Err(Error::Cache("truncated array".into()));
        }
        Ok(bytes)
    };
    let row_ptr =
        read_vec(m + 1, 8)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
    let col_indices = read_vec(nnz, 4)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    let vals = read_vec(nnz, 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    CsrMatrix::new(m, n, row_ptr, col_indices, vals)
}
