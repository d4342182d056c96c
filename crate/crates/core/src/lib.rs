//! Sparse × dense matrix multiplication (`Y = A * X`, `A` in CSR) with
//! row kernels generated at run time for the dense width `d`.
//!
//! The pipeline:
//!
//! 1. [`plan::build_kernel`] splits the `d` output columns of a row into
//!    register-sized accumulator chunks and lays out a virtual program that
//!    makes a single pass over each row's nonzeros.
//! 2. [`native::emit`] turns that program into x86-64 machine code;
//!    [`interp::interpret`] executes it portably and counts operations.
//! 3. [`executor::run_spmm`] partitions rows across threads
//!    ([`partition`]) and runs the kernel on every worker.
//!
//! ```
//! use spmm_jit::{run_spmm, random_dense, Backend, CsrMatrix, RunConfig};
//!
//! let a = CsrMatrix::identity(4);
//! let x = random_dense(4, 16, 1).unwrap();
//! let cfg = RunConfig { backend: Backend::Interp, threads: 2, ..Default::default() };
//! let (y, _report) = run_spmm(&a, &x, &cfg).unwrap();
//! assert_eq!(y, x);
//! ```

pub mod error;
pub mod executor;
pub mod interp;
pub mod matrix;
pub mod native;
pub mod partition;
pub mod plan;

pub use error::{Error, Result};
pub use executor::{max_relative_error, run_spmm, Backend, RunConfig, RunReport, ABS_FLOOR, REL_TOL};
pub use interp::{counter_model, interpret, ExecCounters, Work};
pub use matrix::{
    load_matrix_market, random_dense, spmm_reference, synthetic_csr, validate_csr, CsrMatrix, DenseMatrix,
    SyntheticSpec, Violation,
};
pub use native::{emit, ExecutableKernel};
pub use partition::{
    merge_path_search, split_merge, split_nnz, split_rows_static, DispatchCounter, MergeCoordinate, RowRange, Strategy,
    WorkPartition,
};
pub use plan::{build_kernel, detect_tier, plan_registers, KernelPlan, RegisterPlan, SimdTier};
