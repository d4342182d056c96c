//! Sparse (CSR) and dense row-major matrices, input loading, and the scalar
//! reference product used as the correctness oracle for every backend.

mod cache;
mod mtx;
mod synth;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::{read_csr_cache, write_csr_cache, CACHE_MAGIC, CACHE_VERSION};
pub use mtx::{load_matrix_market, read_matrix_market, write_matrix_market};
pub use synth::{synthetic_csr, SyntheticSpec};

/// A broken CSR invariant, reported by [`validate_csr`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    RowPtrLength { expected: usize, found: usize },
    RowPtrStart { found: usize },
    RowPtrEnd { found: usize, nnz: usize },
    RowPtrDecreasing { index: usize },
    ColumnOutOfRange { index: usize, col: u32, n: usize },
    LengthMismatch { cols: usize, vals: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowPtrLength { expected, found } => {
                write!(f, "row_ptr has length {found}, expected {expected}")
            }
            Violation::RowPtrStart { found } => write!(f, "row_ptr[0] is {found}, expected 0"),
            Violation::RowPtrEnd { found, nnz } => {
                write!(f, "row_ptr[m] is {found}, expected nnz = {nnz}")
            }
            Violation::RowPtrDecreasing { index } => {
                write!(f, "row_ptr not nondecreasing at {index}")
            }
            Violation::ColumnOutOfRange { index, col, n } => {
                write!(f, "column index out of range at {index}: {col} >= {n}")
            }
            Violation::LengthMismatch { cols, vals } => {
                write!(f, "col_indices has length {cols} but vals has length {vals}")
            }
        }
    }
}

/// Sparse matrix in compressed sparse row form.
///
/// `row_ptr[i]..row_ptr[i + 1]` indexes the column indices and values of row
/// `i`. Instances built through [`CsrMatrix::new`] or the loaders always hold
/// the invariants checked by [`validate_csr`]; [`CsrMatrix::from_parts_unchecked`]
/// exists so that malformed inputs can be represented and diagnosed.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    m: usize,
    n: usize,
    row_ptr: Vec<usize>,
    col_indices: Vec<u32>,
    vals: Vec<f32>,
}

impl CsrMatrix {
    pub fn new(m: usize, n: usize, row_ptr: Vec<usize>, col_indices: Vec<u32>, vals: Vec<f32>) -> Result<Self> {
        let a = Self::from_parts_unchecked(m, n, row_ptr, col_indices, vals);
        let violations = validate_csr(&a);
        if violations.is_empty() {
            Ok(a)
        } else {
            Err(Error::InvalidCsr(violations))
        }
    }

    pub fn from_parts_unchecked(
        m: usize,
        n: usize,
        row_ptr: Vec<usize>,
        col_indices: Vec<u32>,
        vals: Vec<f32>,
    ) -> Self {
        Self { m, n, row_ptr, col_indices, vals }
    }

    /// Builds a canonical CSR matrix from 0-based `(row, col, value)` entries.
    ///
    /// Entries are ordered by row and then column. Repeated coordinates are
    /// summed in input order.
    pub fn from_triplets(m: usize, n: usize, entries: &[(usize, usize, f32)]) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|&&(r, c, _)| r >= m || c >= n) {
            return Err(Error::DimensionMismatch(format!("entry ({r}, {c}) outside a {m}x{n} matrix")));
        }
        if n > u32::MAX as usize + 1 {
            return Err(Error::DimensionMismatch(format!("{n} columns exceed the u32 index range")));
        }
        let mut order: Vec<usize> = (0..entries.len()).collect();
        // stable: duplicates keep input order for the summation below
        order.sort_by_key(|&k| (entries[k].0, entries[k].1));

        let mut row_ptr = vec![0usize; m + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut vals = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, v) = entries[k];
            if last == Some((r, c)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_indices.push(c as u32);
            vals.push(v);
        }
        for i in 0..m {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self::new(m, n, row_ptr, col_indices, vals)
    }

    pub fn identity(n: usize) -> Self {
        Self { m: n, n, row_ptr: (0..=n).collect(), col_indices: (0..n as u32).collect(), vals: vec![1.0; n] }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn vals(&self) -> &[f32] {
        &self.vals
    }

    /// Number of stored entries in row `i`.
    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.m).map(|i| self.row_nnz(i)).max().unwrap_or(0)
    }

    /// Iterates `(row, col, value)` in storage order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f32)> + '_ {
        (0..self.m).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_indices[k] as usize, self.vals[k]))
        })
    }

    /// Dense copy; repeated coordinates (only possible in unchecked inputs) are summed.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.m, self.n);
        for (i, j, v) in self.triplets() {
            d.data[i * self.n + j] += v;
        }
        d
    }
}

/// Checks every CSR invariant and reports each violation with its offending index.
pub fn validate_csr(a: &CsrMatrix) -> Vec<Violation> {
    let mut out = Vec::new();
    let nnz = a.col_indices.len();
    if a.vals.len() != nnz {
        out.push(Violation::LengthMismatch { cols: nnz, vals: a.vals.len() });
    }
    if a.row_ptr.len() != a.m + 1 {
        out.push(Violation::RowPtrLength { expected: a.m + 1, found: a.row_ptr.len() });
    } else {
        if a.row_ptr[0] != 0 {
            out.push(Violation::RowPtrStart { found: a.row_ptr[0] });
        }
        if a.row_ptr[a.m] != nnz {
            out.push(Violation::RowPtrEnd { found: a.row_ptr[a.m], nnz });
        }
    }
    for (index, w) in a.row_ptr.windows(2).enumerate() {
        if w[1] < w[0] {
            out.push(Violation::RowPtrDecreasing { index: index + 1 });
        }
    }
    for (index, &col) in a.col_indices.iter().enumerate() {
        if col as usize >= a.n {
            out.push(Violation::ColumnOutOfRange { index, col, n: a.n });
        }
    }
    out
}

/// Dense row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::DimensionMismatch(format!(
                "{} elements cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First 8 bytes of the SHA-256 of the shape and the little-endian elements.
    /// Equal checksums mean bitwise-equal contents (up to hash collisions).
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_be_bytes(digest[..8].try_into().unwrap())
    }
}

/// Uniform `[0, 1)` values from ChaCha8 seeded with `seed`.
///
/// The generator is `rand_chacha::ChaCha8Rng::seed_from_u64(seed)` and values
/// are drawn row-major, one `f32` per element.
pub fn random_dense(rows: usize, cols: usize, seed: u64) -> Result<DenseMatrix> {
    if rows == 0 {
        return Err(Error::ZeroDimension("rows"));
    }
    if cols == 0 {
        return Err(Error::ZeroDimension("cols"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.random::<f32>()).collect();
    Ok(DenseMatrix { rows, cols, data })
}

/// `Y = A * X` with a separate multiply and add per nonzero, in CSR order.
pub fn spmm_reference(a: &CsrMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    if a.n != x.rows {
        return Err(Error::DimensionMismatch(format!("A has {} columns but X has {} rows", a.n, x.rows)));
    }
    let d = x.cols;
    let mut y = DenseMatrix::zeros(a.m, d);
    for i in 0..a.m {
        for j in 0..d {
            let mut ret = 0.0f32;
            for idx in a.row_ptr[i]..a.row_ptr[i + 1] {
                let k = a.col_indices[idx] as usize;
                let prod = a.vals[idx] * x.data[k * d + j];
                ret += prod;
            }
            y.data[i * d + j] = ret;
        }
    }
    Ok(y)
}
