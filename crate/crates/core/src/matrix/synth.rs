use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CsrMatrix;
use crate::error::{Error, Result};

/// Parameters of a synthetic sparse matrix.
///
/// Row lengths average `avg_nnz_per_row`. With `skew = 0` every row gets the
/// average (randomly rounded); larger `skew` draws row weights from a Pareto
/// tail `u^-skew`, giving a few long rows and many short ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub avg_nnz_per_row: f64,
    pub skew: f64,
    pub seed: u64,
}

pub fn synthetic_csr(spec: &SyntheticSpec) -> Result<CsrMatrix> {
    if spec.rows == 0 {
        return Err(Error::ZeroDimension("rows"));
    }
    if spec.cols == 0 {
        return Err(Error::ZeroDimension("cols"));
    }
    let nonnegative = |v: f64| v >= 0.0; // false for NaN
    if !nonnegative(spec.avg_nnz_per_row) || !nonnegative(spec.skew) {
        return Err(Error::DimensionMismatch("average row length and skew must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = (0..spec.rows)
        .map(|_| {
            if spec.skew == 0.0 {
                1.0
            } else {
                // (0, 1] so the power stays finite
                let u = 1.0 - rng.random::<f64>();
                u.powf(-spec.skew).min(1e12)
            }
        })
        .collect();
    let mean = weights.iter().sum::<f64>() / spec.rows as f64;

    let mut row_ptr = Vec::with_capacity(spec.rows + 1);
    row_ptr.push(0usize);
    let mut col_indices = Vec::new();
    let mut vals = Vec::new();
    for w in weights {
        let target = spec.avg_nnz_per_row * w / mean;
        let mut len = target.floor() as usize;
        if rng.random::<f64>() < target.fract() {
            len += 1;
        }
        let len = len.min(spec.cols);
        let mut cols = index::sample(&mut rng, spec.cols, len).into_vec();
        cols.sort_unstable();
        col_indices.extend(cols.into_iter().map(|c| c as u32));
        vals.extend((0..len).map(|_| rng.random::<f32>()));
        row_ptr.push(col_indices.len());
    }
    CsrMatrix::new(spec.rows, spec.cols, row_ptr, col_indices, vals)
}
