//! Portable executor for [`KernelPlan`]s.
//!
//! Every fused multiply-add is a correctly rounded `f32::mul_add`, applied in
//! the same order as the native code, so the two backends agree bit for bit.
//! Execution also counts virtual instructions by category:
//!
//! | op          | counters                                  |
//! |-------------|-------------------------------------------|
//! | loop test   | branches                                  |
//! | `LoadCol`   | memory_loads                              |
//! | `Broadcast` | memory_loads                              |
//! | `Fma`       | memory_loads + vector_arith/scalar_arith  |
//! | `Store`     | stores                                    |
//! | batch claim | branches                                  |
//!
//! Every executed op, including `Zero`, `RowBounds`, `Advance` and the
//! per-row step of the driver, adds one to `instructions`.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{CsrMatrix, DenseMatrix};
use crate::partition::{DispatchCounter, RowRange};
use crate::plan::{Driver, KernelPlan, VInst};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecCounters {
    pub memory_loads: u64,
    pub stores: u64,
    pub branches: u64,
    pub vector_arith: u64,
    pub scalar_arith: u64,
    pub instructions: u64,
}

impl AddAssign for ExecCounters {
    fn add_assign(&mut self, o: Self) {
        self.memory_loads += o.memory_loads;
        self.stores += o.stores;
        self.branches += o.branches;
        self.vector_arith += o.vector_arith;
        self.scalar_arith += o.scalar_arith;
        self.instructions += o.instructions;
    }
}

impl Add for ExecCounters {
    type Output = Self;

    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for ExecCounters {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Rows handled by one call.
#[derive(Debug, Clone, Copy)]
pub enum Work<'a> {
    Range(RowRange),
    /// Claims batches (size taken from the plan's driver) until exhausted.
    Dynamic(&'a DispatchCounter),
}

/// Raw view of the output rows, shared by workers that write disjoint rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SharedRows {
    ptr: *mut f32,
    rows: usize,
    cols: usize,
}

// Workers only touch rows assigned to them; see `row_mut`.
unsafe impl Send for SharedRows {}
unsafe impl Sync for SharedRows {}

impl SharedRows {
    pub(crate) fn new(y: &mut DenseMatrix) -> Self {
        Self { ptr: y.data_mut().as_mut_ptr(), rows: y.rows(), cols: y.cols() }
    }

    pub(crate) fn as_ptr(&self) -> *mut f32 {
        self.ptr
    }

    /// # Safety
    /// No other live reference to row `i` may exist.
    #[allow(clippy::mut_from_ref)]
    unsafe fn row_mut(&self, i: usize) -> &mut [f32] {
        assert!(i < self.rows);
        std::slice::from_raw_parts_mut(self.ptr.add(i * self.cols), self.cols)
    }
}

pub(crate) fn check_shapes(
    plan: &KernelPlan,
    a: &CsrMatrix,
    x: &DenseMatrix,
    y_rows: usize,
    y_cols: usize,
) -> Result<()> {
    let d = plan.d();
    if a.cols() != x.rows() {
        return Err(Error::DimensionMismatch(format!("A has {} columns but X has {} rows", a.cols(), x.rows())));
    }
    if x.cols() != d || y_cols != d || y_rows != a.rows() {
        return Err(Error::DimensionMismatch(format!(
            "plan is for d = {d}; X is {}x{}, Y is {y_rows}x{y_cols}, A has {} rows",
            x.rows(),
            x.cols(),
            a.rows()
        )));
    }
    Ok(())
}

/// Runs `plan` over `work`, writing the covered rows of `y`.
///
/// Under [`Work::Dynamic`] the plan must use a dynamic driver.
pub fn interpret(
    plan: &KernelPlan,
    a: &CsrMatrix,
    x: &DenseMatrix,
    y: &mut DenseMatrix,
    work: Work<'_>,
) -> Result<ExecCounters> {
    check_shapes(plan, a, x, y.rows(), y.cols())?;
    check_work(plan, a, &work)?;
    let out = SharedRows::new(y);
    // SAFETY: `y` is exclusively borrowed for the whole call.
    Ok(unsafe { interpret_shared(plan, a, x, out, work) })
}

pub(crate) fn check_work(plan: &KernelPlan, a: &CsrMatrix, work: &Work<'_>) -> Result<()> {
    match (work, plan.driver) {
        (Work::Range(r), Driver::Range) if r.begin <= r.end && r.end <= a.rows() => Ok(()),
        (Work::Range(r), Driver::Range) => {
            Err(Error::DimensionMismatch(format!("row range {r} outside a matrix with {} rows", a.rows())))
        }
        (Work::Dynamic(_), Driver::Dynamic { .. }) => Ok(()),
        _ => Err(Error::DimensionMismatch("work kind does not match the plan's driver".into())),
    }
}

/// # Safety
/// Shapes must have been checked, and no other thread may write the rows
/// this call covers.
pub(crate) unsafe fn interpret_shared(
    plan: &KernelPlan,
    a: &CsrMatrix,
    x: &DenseMatrix,
    out: SharedRows,
    work: Work<'_>,
) -> ExecCounters {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("fma") {
        return interpret_fma(plan, a, x, out, work);
    }
    execute(plan, a, x, out, work)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "fma")]
unsafe fn interpret_fma(
    plan: &KernelPlan,
    a: &CsrMatrix,
    x: &DenseMatrix,
    out: SharedRows,
    work: Work<'_>,
) -> ExecCounters {
    execute(plan, a, x, out, work)
}

#[inline(always)]
unsafe fn execute(plan: &KernelPlan, a: &CsrMatrix, x: &DenseMatrix, out: SharedRows, work: Work<'_>) -> ExecCounters {
    let mut vm = Machine::new(a, x);
    let mut c = ExecCounters::default();
    match work {
        Work::Range(range) => {
            for i in range.rows() {
                vm.row(plan, i, out.row_mut(i), &mut c);
            }
        }
        Work::Dynamic(counter) => {
            let Driver::Dynamic { batch_size } = plan.driver else { unreachable!("checked by check_work") };
            loop {
                c.branches += 1;
                c.instructions += 1;
                let Some(range) = counter.next_batch(batch_size, a.rows()) else { break };
                for i in range.rows() {
                    vm.row(plan, i, out.row_mut(i), &mut c);
                }
            }
        }
    }
    c
}

const REGS: usize = 32;
const MAX_LANES: usize = 16;

struct Machine<'a> {
    row_ptr: &'a [usize],
    col_indices: &'a [u32],
    vals: &'a [f32],
    x: &'a [f32],
    d: usize,
    regs: [[f32; MAX_LANES]; REGS],
    idx: usize,
    end: usize,
    xrow: usize,
}

impl<'a> Machine<'a> {
    fn new(a: &'a CsrMatrix, x: &'a DenseMatrix) -> Self {
        Self {
            row_ptr: a.row_ptr(),
            col_indices: a.col_indices(),
            vals: a.vals(),
            x: x.data(),
            d: x.cols(),
            regs: [[0.0; MAX_LANES]; REGS],
            idx: 0,
            end: 0,
            xrow: 0,
        }
    }

    #[inline(always)]
    fn row(&mut self, plan: &KernelPlan, i: usize, y: &mut [f32], c: &mut ExecCounters) {
        c.instructions += 1;
        for tile in &plan.tiles {
            for inst in &tile.prologue {
                self.step(*inst, i, y, c);
            }
            loop {
                c.branches += 1;
                c.instructions += 1;
                if self.idx >= self.end {
                    break;
                }
                for inst in &tile.body {
                    self.step(*inst, i, y, c);
                }
            }
            for inst in &tile.epilogue {
                self.step(*inst, i, y, c);
            }
        }
    }

    #[inline(always)]
    fn step(&mut self, inst: VInst, i: usize, y: &mut [f32], c: &mut ExecCounters) {
        c.instructions += 1;
        match inst {
            VInst::Zero { acc, lanes } => self.regs[acc as usize][..lanes].fill(0.0),
            VInst::RowBounds => {
                self.idx = self.row_ptr[i];
                self.end = self.row_ptr[i + 1];
            }
            VInst::LoadCol => {
                c.memory_loads += 1;
                self.xrow = self.col_indices[self.idx] as usize * self.d;
            }
            VInst::Broadcast { reg } => {
                c.memory_loads += 1;
                self.regs[reg as usize] = [self.vals[self.idx]; MAX_LANES];
            }
            VInst::Fma { acc, src, lanes, col } => {
                c.memory_loads += 1;
                if lanes > 1 {
                    c.vector_arith += 1;
                } else {
                    c.scalar_arith += 1;
                }
                let b = self.regs[src as usize][0];
                let xs = &self.x[self.xrow + col..self.xrow + col + lanes];
                let acc = &mut self.regs[acc as usize][..lanes];
                for (r, &xv) in acc.iter_mut().zip(xs) {
                    *r = b.mul_add(xv, *r);
                }
            }
            VInst::Advance => self.idx += 1,
            VInst::Store { acc, lanes, col } => {
                c.stores += 1;
                y[col..col + lanes].copy_from_slice(&self.regs[acc as usize][..lanes]);
            }
        }
    }
}

/// Closed-form counters for running `plan` over all of `a` with `workers`
/// threads, without executing anything.
///
/// Per row and tile with `z` nonzeros and `c` chunks: `z * (2 + c)` loads,
/// `z * c` FMAs, `c` stores and `z + 1` branches. Dynamic dispatch adds one
/// branch per claim: `ceil(m / batch)` successful ones plus one failing
/// claim per worker.
pub fn counter_model(a: &CsrMatrix, plan: &KernelPlan, workers: usize) -> ExecCounters {
    let m = a.rows() as u64;
    let z = a.nnz() as u64;
    let mut c = ExecCounters { instructions: m, ..Default::default() };
    for tile in &plan.tiles {
        let chunks = tile.epilogue.len() as u64;
        let (mut vec, mut scalar) = (0u64, 0u64);
        for inst in &tile.body {
            if let VInst::Fma { lanes, .. } = inst {
                if *lanes > 1 {
                    vec += 1;
                } else {
                    scalar += 1;
                }
            }
        }
        c.memory_loads += z * (2 + chunks);
        c.vector_arith += z * vec;
        c.scalar_arith += z * scalar;
        c.stores += m * chunks;
        c.branches += z + m;
        c.instructions += m * tile.prologue.len() as u64 + (z + m) + z * tile.body.len() as u64 + m * chunks;
    }
    if let Driver::Dynamic { batch_size } = plan.driver {
        let claims = m.div_ceil(batch_size as u64) + workers as u64;
        c.branches += claims;
        c.instructions += claims;
    }
    c
}

/// Branches per row when the dense-column loop is kept as a loop: every
/// one of the `d` column iterations runs its own nonzero loop of `z + 1`
/// tests.
pub fn column_loop_branches(z: u64, d: u64) -> u64 {
    d * (z + 1)
}

/// Branches per row under column merging with a single tile.
pub fn merged_branches(z: u64) -> u64 {
    z + 1
}
