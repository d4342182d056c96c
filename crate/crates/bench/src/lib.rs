//! Shared fixtures for the benchmarks in `benches/`.

use spmm_jit::{random_dense, synthetic_csr, CsrMatrix, DenseMatrix, SyntheticSpec};

/// Square synthetic matrix with about `nnz` nonzeros and a matching dense operand.
pub fn fixture(nnz: usize, avg_nnz_per_row: f64, skew: f64, d: usize) -> (CsrMatrix, DenseMatrix) {
    let rows = ((nnz as f64 / avg_nnz_per_row) as usize).max(1);
    let a = synthetic_csr(&SyntheticSpec { rows, cols: rows, avg_nnz_per_row, skew, seed: 1 })
        .expect("valid synthetic spec");
    let x = random_dense(rows, d, 2).expect("nonzero shape");
    (a, x)
}
