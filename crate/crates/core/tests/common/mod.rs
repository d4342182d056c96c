#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spmm_jit::plan::CpuFeatures;
use spmm_jit::{CsrMatrix, SimdTier};

/// Each of the `m * n` cells is nonzero with probability `density`.
pub fn bernoulli_csr(m: usize, n: usize, density: f64, seed: u64) -> CsrMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for i in 0..m {
        for j in 0..n {
            if rng.random_bool(density) {
                entries.push((i, j, rng.random_range(-1.0f32..1.0)));
            }
        }
    }
    CsrMatrix::from_triplets(m, n, &entries).unwrap()
}

/// Row-ptr-only matrix for partition tests.
pub fn from_row_lengths(lengths: &[usize]) -> CsrMatrix {
    let mut row_ptr = vec![0];
    for &l in lengths {
        row_ptr.push(row_ptr.last().unwrap() + l);
    }
    let nnz = *row_ptr.last().unwrap();
    CsrMatrix::new(lengths.len(), 1, row_ptr, vec![0; nnz], vec![1.0; nnz]).unwrap()
}

/// Tiers the host can run natively, widest first.
pub fn native_tiers() -> Vec<SimdTier> {
    let f = CpuFeatures::host();
    [SimdTier::V512, SimdTier::V256, SimdTier::Scalar].into_iter().filter(|&t| f.check_native(t).is_ok()).collect()
}

pub fn bits(y: &spmm_jit::DenseMatrix) -> Vec<u32> {
    y.data().iter().map(|v| v.to_bits()).collect()
}
