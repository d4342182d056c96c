//! Fork-join SpMM driver: plan, emit once, run `T` workers, join, report.

use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{check_shapes, interpret_shared, ExecCounters, SharedRows, Work};
use crate::matrix::{spmm_reference, CsrMatrix, DenseMatrix};
use crate::native::{emit, KernelLease};
use crate::partition::{DispatchCounter, Strategy, WorkPartition, DEFAULT_BATCH_SIZE};
use crate::plan::{build_kernel, detect_tier, KernelPlan, SimdTier};

/// Relative tolerance for verification against the reference.
pub const REL_TOL: f64 = 1e-5;
/// Absolute tolerance for elements whose reference value is near zero.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Native,
    Interp,
}

impl Backend {
    pub const ALL: [Backend; 2] = [Backend::Native, Backend::Interp];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Native => "native",
            Backend::Interp => "interp",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "native" | "jit" => Ok(Backend::Native),
            "interp" | "interpreter" => Ok(Backend::Interp),
            other => Err(format!("unknown backend {other:?} (expected native or interp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub threads: usize,
    pub backend: Backend,
    /// Widest tier allowed; `None` picks the host's best.
    pub tier_cap: Option<SimdTier>,
    pub batch_size: usize,
    /// Claim row batches from a shared counter (row-split only).
    pub dynamic: bool,
    pub verify: bool,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RowSplit,
            threads: thread::available_parallelism().map_or(1, |n| n.get()),
            backend: Backend::Native,
            tier_cap: None,
            batch_size: DEFAULT_BATCH_SIZE,
            dynamic: true,
            verify: false,
            trials: 1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::ZeroThreads);
        }
        if self.batch_size == 0 {
            return Err(Error::ZeroBatch);
        }
        if self.trials == 0 {
            return Err(Error::ZeroDimension("trials"));
        }
        Ok(())
    }

    /// Whether rows are claimed dynamically under this configuration.
    pub fn uses_dynamic_dispatch(&self) -> bool {
        self.dynamic && self.strategy == Strategy::RowSplit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub backend: Backend,
    pub tier: SimdTier,
    pub threads: usize,
    pub dynamic: bool,
    /// Wall time of each trial.
    pub times_s: Vec<f64>,
    pub mean_s: f64,
    /// Planning plus code emission.
    pub codegen_s: f64,
    /// `100 * codegen / (codegen + mean)`.
    pub codegen_pct: f64,
    /// `2 * nnz * d / mean / 1e9`
    pub gflops: f64,
    /// Merged counters of the first trial; interpreter backend only.
    pub counters: Option<ExecCounters>,
    pub max_rel_err: Option<f64>,
    pub y_checksum: u64,
    /// Bytes of machine code; native backend only.
    pub code_size: Option<usize>,
}

impl RunReport {
    /// `None` when verification was not requested.
    pub fn verified(&self) -> Option<bool> {
        self.max_rel_err.map(|e| e <= REL_TOL)
    }
}

/// Element-wise error `|y - r| / max(|r|, ABS_FLOOR / REL_TOL)`, maximized.
///
/// A result is within tolerance exactly when
/// `|y - r| <= max(REL_TOL * |r|, ABS_FLOOR)`, i.e. when this is at most
/// [`REL_TOL`]. NaN mismatches count as infinite error.
pub fn max_relative_error(y: &DenseMatrix, reference: &DenseMatrix) -> Result<f64> {
    if (y.rows(), y.cols()) != (reference.rows(), reference.cols()) {
        return Err(Error::DimensionMismatch(format!(
            "comparing {}x{} with {}x{}",
            y.rows(),
            y.cols(),
            reference.rows(),
            reference.cols()
        )));
    }
    let floor = ABS_FLOOR / REL_TOL;
    let mut worst = 0.0f64;
    for (&u, &r) in y.data().iter().zip(reference.data()) {
        let (u, r) = (f64::from(u), f64::from(r));
        let e = if u.is_nan() || r.is_nan() {
            if u.is_nan() && r.is_nan() {
                0.0
            } else {
                f64::INFINITY
            }
        } else if u == r {
            0.0
        } else {
            (u - r).abs() / r.abs().max(floor)
        };
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Computes `Y = A * X` under `cfg`.
pub fn run_spmm(a: &CsrMatrix, x: &DenseMatrix, cfg: &RunConfig) -> Result<(DenseMatrix, RunReport)> {
    cfg.validate()?;
    let d = x.cols();
    if d == 0 {
        return Err(Error::ZeroDimension("d"));
    }
    let tier = match cfg.backend {
        Backend::Native => detect_tier(cfg.tier_cap)?,
        Backend::Interp => cfg.tier_cap.map_or_else(|| detect_tier(None), Ok)?,
    };
    let dynamic = cfg.uses_dynamic_dispatch().then_some(cfg.batch_size);

    let t0 = Instant::now();
    let plan = build_kernel(d, tier, cfg.strategy, dynamic)?;
    let kernel = match cfg.backend {
        Backend::Native => Some(emit(&plan)?),
        Backend::Interp => None,
    };
    let codegen_s = t0.elapsed().as_secs_f64();

    let mut y = DenseMatrix::zeros(a.rows(), d);
    check_shapes(&plan, a, x, y.rows(), y.cols())?;
    let partition = WorkPartition::new(a, cfg.strategy, cfg.threads, dynamic)?;
    #[cfg(debug_assertions)]
    assert_single_writer(a.rows(), &partition);

    let lease = kernel.as_ref().map(|k| k.lease()).transpose()?;
    let mut times_s = Vec::with_capacity(cfg.trials);
    let mut counters = None;
    for _ in 0..cfg.trials {
        let out = SharedRows::new(&mut y);
        let counter = DispatchCounter::new();
        let t = Instant::now();
        let c = run_workers(&plan, lease.as_ref(), a, x, out, &partition, &counter, cfg.threads)?;
        times_s.push(t.elapsed().as_secs_f64());
        if counters.is_none() && cfg.backend == Backend::Interp {
            counters = Some(c);
        }
    }
    drop(lease);
    let code_size = kernel.as_ref().map(|k| k.code_size());
    if let Some(k) = kernel {
        k.release()?;
    }

    let mean_s = times_s.iter().sum::<f64>() / times_s.len() as f64;
    let flops = 2.0 * a.nnz() as f64 * d as f64;
    let gflops = if mean_s > 0.0 { flops / mean_s / 1e9 } else { 0.0 };
    let codegen_pct = if codegen_s + mean_s > 0.0 { 100.0 * codegen_s / (codegen_s + mean_s) } else { 0.0 };
    let max_rel_err = if cfg.verify { Some(max_relative_error(&y, &spmm_reference(a, x)?)?) } else { None };
    let report = RunReport {
        strategy: cfg.strategy,
        backend: cfg.backend,
        tier,
        threads: cfg.threads,
        dynamic: dynamic.is_some(),
        times_s,
        mean_s,
        codegen_s,
        codegen_pct,
        gflops,
        counters,
        max_rel_err,
        y_checksum: y.checksum(),
        code_size,
    };
    Ok((y, report))
}

#[allow(clippy::too_many_arguments)]
fn run_workers(
    plan: &KernelPlan,
    lease: Option<&KernelLease<'_>>,
    a: &CsrMatrix,
    x: &DenseMatrix,
    out: SharedRows,
    partition: &WorkPartition,
    counter: &DispatchCounter,
    threads: usize,
) -> Result<ExecCounters> {
    let work: Vec<Work<'_>> = match partition.dynamic {
        Some(_) => (0..threads).map(|_| Work::Dynamic(counter)).collect(),
        None => partition.ranges.iter().map(|&r| Work::Range(r)).collect(),
    };
    let run_one = |w: Work<'_>| -> ExecCounters {
        // SAFETY: shapes were checked by the caller and partitions are exact
        // covers, so no two workers write the same row of `out`.
        unsafe {
            match lease {
                Some(l) => {
                    l.call(a, x, out, w);
                    ExecCounters::default()
                }
                None => interpret_shared(plan, a, x, out, w),
            }
        }
    };
    thread::scope(|s| {
        let handles: Vec<_> = work.into_iter().map(|w| s.spawn(move || run_one(w))).collect();
        let mut total = ExecCounters::default();
        let mut panicked = false;
        for h in handles {
            match h.join() {
                Ok(c) => total += c,
                Err(_) => panicked = true,
            }
        }
        if panicked {
            Err(Error::WorkerPanicked)
        } else {
            Ok(total)
        }
    })
}

/// Every row is owned by exactly one static range.
#[cfg(debug_assertions)]
fn assert_single_writer(m: usize, partition: &WorkPartition) {
    if partition.dynamic.is_some() {
        return;
    }
    let mut writers = vec![0u8; m];
    for r in &partition.ranges {
        for i in r.rows() {
            writers[i] += 1;
        }
    }
    assert!(writers.iter().all(|&w| w == 1), "row written by zero or several workers");
}
