//! x86-64 code generation for [`KernelPlan`]s.
//!
//! The generated function has the System V signature
//! `extern "sysv64" fn(*const KernelArgs)`. Register use:
//!
//! | register | holds                         |
//! |----------|-------------------------------|
//! | rdi      | `&KernelArgs`                 |
//! | r8       | `row_ptr`                     |
//! | r9       | `col_indices`                 |
//! | rcx      | `vals`                        |
//! | rbx      | `X`                           |
//! | r13      | `Y`                           |
//! | rsi, rdx | current row, row limit        |
//! | r10, r11 | nonzero index, row end        |
//! | r12      | column index `k`              |
//! | rax      | dense row address             |
//! | r14, r15 | `m` and the dispatch counter  |

mod mem;
mod x86;

use std::io::{self, Write};
use std::sync::{RwLock, RwLockReadGuard, TryLockError};

use crate::error::{Error, Result};
use crate::interp::{check_shapes, check_work, SharedRows, Work};
use crate::matrix::{CsrMatrix, DenseMatrix};
use crate::plan::{CpuFeatures, Driver, KernelPlan, SimdTier, Stride, VInst};

use mem::CodeBuffer;
use x86::{Assembler, Cond, Gpr, Mem, Width};

/// Argument block read by generated code.
#[derive(Debug, Clone, Copy)]
#[repr(C)]
pub struct KernelArgs {
    pub row_ptr: *const usize,
    pub col_indices: *const u32,
    pub vals: *const f32,
    pub x: *const f32,
    pub y: *mut f32,
    pub row_begin: usize,
    /// Exclusive end row; the row count `m` under dynamic dispatch.
    pub row_end: usize,
    pub counter: *mut u64,
}

const ARG_ROW_PTR: i32 = 0;
const ARG_COL: i32 = 8;
const ARG_VALS: i32 = 16;
const ARG_X: i32 = 24;
const ARG_Y: i32 = 32;
const ARG_BEGIN: i32 = 40;
const ARG_END: i32 = 48;
const ARG_COUNTER: i32 = 56;

const SAVED: [Gpr; 6] = [Gpr::Rbx, Gpr::Rbp, Gpr::R12, Gpr::R13, Gpr::R14, Gpr::R15];

type KernelFn = unsafe extern "sysv64" fn(*const KernelArgs);

fn too_large(what: &str, v: usize) -> Error {
    Error::DimensionMismatch(format!("{what} {v} does not fit a 32-bit immediate"))
}

fn imm32(what: &str, v: usize) -> Result<i32> {
    i32::try_from(v).map_err(|_| too_large(what, v))
}

/// Machine code for `plan`. Pure: the same plan always yields the same bytes.
pub fn assemble(plan: &KernelPlan) -> Result<Vec<u8>> {
    let tier = plan.tier();
    let evex = tier == SimdTier::V512;
    let row_bytes = imm32("dense row size", plan.stride.row_bytes())?;
    imm32("column offset", plan.d() * 4)?;

    let mut a = Assembler::new();
    for r in SAVED {
        a.push(r);
    }
    a.mov_load64(Gpr::R8, Mem::base(Gpr::Rdi, ARG_ROW_PTR));
    a.mov_load64(Gpr::R9, Mem::base(Gpr::Rdi, ARG_COL));
    a.mov_load64(Gpr::Rcx, Mem::base(Gpr::Rdi, ARG_VALS));
    a.mov_load64(Gpr::Rbx, Mem::base(Gpr::Rdi, ARG_X));
    a.mov_load64(Gpr::R13, Mem::base(Gpr::Rdi, ARG_Y));

    let done = a.new_label();
    let rows = a.new_label();
    let claim = a.new_label();
    match plan.driver {
        Driver::Range => {
            a.mov_load64(Gpr::Rsi, Mem::base(Gpr::Rdi, ARG_BEGIN));
            a.mov_load64(Gpr::Rdx, Mem::base(Gpr::Rdi, ARG_END));
        }
        Driver::Dynamic { batch_size } => {
            let batch = i64::from(imm32("batch size", batch_size)?);
            a.mov_load64(Gpr::R14, Mem::base(Gpr::Rdi, ARG_END));
            a.mov_load64(Gpr::R15, Mem::base(Gpr::Rdi, ARG_COUNTER));
            a.bind(claim);
            a.mov_ri(Gpr::Rsi, batch);
            a.lock_xadd(Mem::base(Gpr::R15, 0), Gpr::Rsi);
            a.cmp_rr(Gpr::Rsi, Gpr::R14);
            a.jcc(Cond::Ae, done);
            a.mov_ri(Gpr::Rdx, batch);
            a.add_rr(Gpr::Rdx, Gpr::Rsi);
            a.cmp_rr(Gpr::Rdx, Gpr::R14);
            a.cmova_rr(Gpr::Rdx, Gpr::R14);
        }
    }
    let exhausted = match plan.driver {
        Driver::Range => done,
        Driver::Dynamic { .. } => claim,
    };
    a.bind(rows);
    a.cmp_rr(Gpr::Rsi, Gpr::Rdx);
    a.jcc(Cond::Ae, exhausted);

    let dense_row = |a: &mut Assembler, index: Gpr, base: Gpr| {
        match plan.stride {
            Stride::Shift(s) => {
                a.mov_rr(Gpr::Rax, index);
                a.shl_ri(Gpr::Rax, s as u8);
            }
            Stride::Multiply(_) => a.imul_rri(Gpr::Rax, index, row_bytes),
        }
        a.add_rr(Gpr::Rax, base);
    };

    for tile in &plan.tiles {
        for inst in &tile.prologue {
            match *inst {
                VInst::Zero { acc, lanes } => {
                    if evex {
                        a.vpxord_zero(acc, Width::for_lanes(lanes));
                    } else {
                        a.vxorps_zero(acc, Width::for_lanes(lanes));
                    }
                }
                VInst::RowBounds => {
                    a.mov_load64(Gpr::R10, Mem::indexed(Gpr::R8, Gpr::Rsi, 8, 0));
                    a.mov_load64(Gpr::R11, Mem::indexed(Gpr::R8, Gpr::Rsi, 8, 8));
                }
                other => unreachable!("{other} in a tile prologue"),
            }
        }
        let top = a.new_label();
        let out = a.new_label();
        a.bind(top);
        a.cmp_rr(Gpr::R10, Gpr::R11);
        a.jcc(Cond::Ae, out);
        for inst in &tile.body {
            match *inst {
                VInst::LoadCol => {
                    a.mov_load32(Gpr::R12, Mem::indexed(Gpr::R9, Gpr::R10, 4, 0));
                    dense_row(&mut a, Gpr::R12, Gpr::Rbx);
                }
                VInst::Broadcast { reg } => {
                    let m = Mem::indexed(Gpr::Rcx, Gpr::R10, 4, 0);
                    match tier {
                        SimdTier::V512 => a.vbroadcastss(reg, m, Width::Z512, true),
                        SimdTier::V256 => a.vbroadcastss(reg, m, Width::Y256, false),
                        SimdTier::Scalar => a.vmovss_load(reg, m),
                    }
                }
                VInst::Fma { acc, src, lanes, col } => {
                    let m = Mem::base(Gpr::Rax, (col * 4) as i32);
                    if lanes == 1 {
                        a.vfmadd231ss(acc, src, m, evex);
                    } else {
                        a.vfmadd231ps(acc, src, m, Width::for_lanes(lanes), evex);
                    }
                }
                VInst::Advance => a.inc(Gpr::R10),
                other => unreachable!("{other} in a tile body"),
            }
        }
        a.jmp(top);
        a.bind(out);
        dense_row(&mut a, Gpr::Rsi, Gpr::R13);
        for inst in &tile.epilogue {
            match *inst {
                VInst::Store { acc, lanes, col } => {
                    let m = Mem::base(Gpr::Rax, (col * 4) as i32);
                    if lanes == 1 {
                        a.vmovss_store(m, acc, evex);
                    } else {
                        a.vmovups_store(m, acc, Width::for_lanes(lanes), evex);
                    }
                }
                other => unreachable!("{other} in a tile epilogue"),
            }
        }
    }
    a.inc(Gpr::Rsi);
    a.jmp(rows);

    a.bind(done);
    a.vzeroupper();
    for r in SAVED.iter().rev() {
        a.pop(*r);
    }
    a.ret();
    Ok(a.finish())
}

/// Generated code for one plan, callable until released.
#[derive(Debug)]
pub struct ExecutableKernel {
    plan: KernelPlan,
    code_size: usize,
    state: RwLock<Option<CodeBuffer>>,
}

/// Emits code for the host CPU.
pub fn emit(plan: &KernelPlan) -> Result<ExecutableKernel> {
    emit_for(plan, &CpuFeatures::host())
}

/// Emits code after checking `plan`'s tier against `features`.
pub fn emit_for(plan: &KernelPlan, features: &CpuFeatures) -> Result<ExecutableKernel> {
    if !cfg!(target_arch = "x86_64") {
        return Err(Error::NativeUnsupported);
    }
    features.check_native(plan.tier())?;
    let code = assemble(plan)?;
    let buf = CodeBuffer::new(&code)?;
    Ok(ExecutableKernel { plan: plan.clone(), code_size: buf.len(), state: RwLock::new(Some(buf)) })
}

impl ExecutableKernel {
    pub fn plan(&self) -> &KernelPlan {
        &self.plan
    }

    pub fn code_size(&self) -> usize {
        self.code_size
    }

    /// Copy of the machine code.
    pub fn code(&self) -> Result<Vec<u8>> {
        Ok(self.lease()?.code().to_vec())
    }

    /// Keeps the code mapped while the lease lives.
    pub fn lease(&self) -> Result<KernelLease<'_>> {
        let guard = self.state.read().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            return Err(Error::KernelReleased);
        }
        Ok(KernelLease { guard, plan: &self.plan })
    }

    /// Unmaps the code. Fails while any lease is alive or after a previous release.
    pub fn release(&self) -> Result<()> {
        let mut guard = match self.state.try_write() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(Error::KernelInUse),
            Err(TryLockError::Poisoned(e)) => e.into_inner(),
        };
        match guard.take() {
            Some(_) => Ok(()),
            None => Err(Error::KernelReleased),
        }
    }

    pub fn is_released(&self) -> bool {
        self.state.read().unwrap_or_else(|e| e.into_inner()).is_none()
    }

    /// Runs the kernel on the calling thread.
    pub fn run(&self, a: &CsrMatrix, x: &DenseMatrix, y: &mut DenseMatrix, work: Work<'_>) -> Result<()> {
        check_shapes(&self.plan, a, x, y.rows(), y.cols())?;
        check_work(&self.plan, a, &work)?;
        let lease = self.lease()?;
        let out = SharedRows::new(y);
        // SAFETY: shapes and work were checked; `y` is exclusively borrowed.
        unsafe { lease.call(a, x, out, work) };
        Ok(())
    }
}

#[derive(Debug)]
pub struct KernelLease<'a> {
    guard: RwLockReadGuard<'a, Option<CodeBuffer>>,
    plan: &'a KernelPlan,
}

impl KernelLease<'_> {
    fn buffer(&self) -> &CodeBuffer {
        self.guard.as_ref().expect("lease holds live code")
    }

    pub fn code(&self) -> &[u8] {
        self.buffer().bytes()
    }

    /// # Safety
    /// `a`, `x` and `out` must have passed `check_shapes`/`check_work` for
    /// this plan, and no other thread may write the rows this call covers.
    pub(crate) unsafe fn call(&self, a: &CsrMatrix, x: &DenseMatrix, out: SharedRows, work: Work<'_>) {
        let (row_begin, row_end, counter) = match work {
            Work::Range(r) => (r.begin, r.end, std::ptr::null_mut()),
            Work::Dynamic(c) => (0, a.rows(), c.as_ptr()),
        };
        debug_assert_eq!(matches!(work, Work::Dynamic(_)), matches!(self.plan.driver, Driver::Dynamic { .. }));
        let args = KernelArgs {
            row_ptr: a.row_ptr().as_ptr(),
            col_indices: a.col_indices().as_ptr(),
            vals: a.vals().as_ptr(),
            x: x.data().as_ptr(),
            y: out.as_ptr(),
            row_begin,
            row_end,
            counter,
        };
        let f: KernelFn = std::mem::transmute(self.buffer().as_ptr());
        f(&args);
    }
}

/// Hex listing, 16 bytes per line with offsets.
pub fn write_hex_dump(mut w: impl Write, code: &[u8]) -> io::Result<()> {
    for (i, line) in code.chunks(16).enumerate() {
        write!(w, "{:08x}:", i * 16)?;
        for b in line {
            write!(w, " {b:02x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
