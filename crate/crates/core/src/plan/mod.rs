//! Row-kernel planning.
//!
//! A [`KernelPlan`] is the column-merged program for one sparse row: every
//! output column of the row lives in an accumulator register for the whole
//! pass over the row's nonzeros, so the dense-column loop disappears. Both
//! backends execute the same plan.

mod tier;

use std::fmt;

pub use tier::{detect_tier, detect_tier_with, CpuFeatures, SimdTier, MAX_ISA_ENV};

use crate::error::{Error, Result};
use crate::partition::Strategy;

/// One accumulator register covering `lanes` consecutive output columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub lanes: usize,
    /// First column covered, counted from column 0 of the row.
    pub col: usize,
    pub acc: u8,
}

/// Columns `[col_begin, col_end)` computed in one pass over a row's nonzeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub col_begin: usize,
    pub col_end: usize,
    pub chunks: Vec<Chunk>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterPlan {
    pub d: usize,
    pub tier: SimdTier,
    pub tiles: Vec<Tile>,
    pub broadcast_reg: u8,
}

impl RegisterPlan {
    pub fn chunk_count(&self) -> usize {
        self.tiles.iter().map(|t| t.chunks.len()).sum()
    }

    pub fn chunk_lanes(&self) -> Vec<usize> {
        self.tiles.iter().flat_map(|t| t.chunks.iter().map(|c| c.lanes)).collect()
    }
}

/// Greedy largest-first split of `d` columns into accumulator chunks.
///
/// The lane sets are canonical coin systems, so greedy is also minimal. A
/// new tile starts whenever the current one holds the tier's accumulator
/// budget; each tile then re-scans the row's nonzeros.
pub fn plan_registers(d: usize, tier: SimdTier) -> Result<RegisterPlan> {
    if d == 0 {
        return Err(Error::ZeroDimension("d"));
    }
    let budget = tier.accumulator_budget();
    let mut tiles: Vec<Tile> = Vec::new();
    let mut col = 0;
    for &lanes in tier.lane_sizes() {
        while d - col >= lanes {
            if tiles.last().is_none_or(|t| t.chunks.len() == budget) {
                tiles.push(Tile { col_begin: col, col_end: col, chunks: Vec::new() });
            }
            let tile = tiles.last_mut().unwrap();
            tile.chunks.push(Chunk { lanes, col, acc: tile.chunks.len() as u8 });
            col += lanes;
            tile.col_end = col;
        }
    }
    Ok(RegisterPlan { d, tier, tiles, broadcast_reg: tier.broadcast_register() })
}

/// How rows reach the row kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    /// Loop over a caller-supplied `[begin, end)` range.
    Range,
    /// Claim `batch_size` rows at a time from a shared atomic cursor.
    Dynamic { batch_size: usize },
}

/// Byte offset of a dense row from its index: a shift when the row size is
/// a power of two, otherwise a multiply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stride {
    Shift(u32),
    Multiply(usize),
}

impl Stride {
    pub fn for_columns(d: usize) -> Self {
        let bytes = d * std::mem::size_of::<f32>();
        if bytes.is_power_of_two() {
            Stride::Shift(bytes.trailing_zeros())
        } else {
            Stride::Multiply(bytes)
        }
    }

    pub fn row_bytes(self) -> usize {
        match self {
            Stride::Shift(s) => 1 << s,
            Stride::Multiply(b) => b,
        }
    }
}

/// Virtual instructions of the row kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VInst {
    /// `acc = 0`
    Zero { acc: u8, lanes: usize },
    /// `idx, end = row_ptr[i], row_ptr[i + 1]`
    RowBounds,
    /// `k = col_indices[idx]`, then locate dense row `k`.
    LoadCol,
    /// `reg[..] = vals[idx]`
    Broadcast { reg: u8 },
    /// `acc += reg * X[k][col..col + lanes]`, one rounding per lane.
    Fma { acc: u8, src: u8, lanes: usize, col: usize },
    /// `idx += 1`
    Advance,
    /// `Y[i][col..col + lanes] = acc`
    Store { acc: u8, lanes: usize, col: usize },
}

/// Code for one tile of a row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileProgram {
    pub col_begin: usize,
    pub col_end: usize,
    /// Runs once per row before the nonzero loop.
    pub prologue: Vec<VInst>,
    /// Runs once per nonzero; each iteration is preceded by the `idx < end` test.
    pub body: Vec<VInst>,
    /// Runs once per row after the loop.
    pub epilogue: Vec<VInst>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelPlan {
    pub register_plan: RegisterPlan,
    pub strategy: Strategy,
    pub driver: Driver,
    pub stride: Stride,
    pub tiles: Vec<TileProgram>,
}

impl KernelPlan {
    pub fn d(&self) -> usize {
        self.register_plan.d
    }

    pub fn tier(&self) -> SimdTier {
        self.register_plan.tier
    }
}

/// Builds the row kernel and its driver.
///
/// `dynamic` is a batch size; it selects batch dispatch for row-split and
/// is ignored by the other strategies, which always run a row range.
pub fn build_kernel(d: usize, tier: SimdTier, strategy: Strategy, dynamic: Option<usize>) -> Result<KernelPlan> {
    let register_plan = plan_registers(d, tier)?;
    let driver = match (strategy, dynamic) {
        (_, Some(0)) => return Err(Error::ZeroBatch),
        (Strategy::RowSplit, Some(batch_size)) => Driver::Dynamic { batch_size },
        _ => Driver::Range,
    };
    let src = register_plan.broadcast_reg;
    let tiles = register_plan
        .tiles
        .iter()
        .map(|tile| {
            let mut prologue: Vec<VInst> =
                tile.chunks.iter().map(|c| VInst::Zero { acc: c.acc, lanes: c.lanes }).collect();
            prologue.push(VInst::RowBounds);
            let mut body = vec![VInst::LoadCol, VInst::Broadcast { reg: src }];
            body.extend(tile.chunks.iter().map(|c| VInst::Fma { acc: c.acc, src, lanes: c.lanes, col: c.col }));
            body.push(VInst::Advance);
            let epilogue =
                tile.chunks.iter().map(|c| VInst::Store { acc: c.acc, lanes: c.lanes, col: c.col }).collect();
            TileProgram { col_begin: tile.col_begin, col_end: tile.col_end, prologue, body, epilogue }
        })
        .collect();
    Ok(KernelPlan { register_plan, strategy, driver, stride: Stride::for_columns(d), tiles })
}

fn reg_name(reg: u8, lanes: usize) -> String {
    let class = match lanes {
        16 => "z",
        8 => "y",
        4 => "x",
        _ => "s",
    };
    format!("{class}{reg}")
}

impl fmt::Display for VInst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            VInst::Zero { acc, lanes } => write!(f, "zero {}", reg_name(acc, lanes)),
            VInst::RowBounds => f.write_str("bounds idx, end <- row_ptr[i], row_ptr[i+1]"),
            VInst::LoadCol => f.write_str("ldcol k <- col_indices[idx]"),
            VInst::Broadcast { reg } => write!(f, "bcast {} <- vals[idx]", reg_name(reg, 16)),
            VInst::Fma { acc, src, lanes, col } => {
                write!(f, "fma {} += {} * x[k][{}:{}]", reg_name(acc, lanes), reg_name(src, lanes), col, col + lanes)
            }
            VInst::Advance => f.write_str("inc idx"),
            VInst::Store { acc, lanes, col } => {
                write!(f, "store y[i][{}:{}] <- {}", col, col + lanes, reg_name(acc, lanes))
            }
        }
    }
}

/// Text dump, one virtual instruction per line.
impl fmt::Display for KernelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stride = match self.stride {
            Stride::Shift(s) => format!("shl {s}"),
            Stride::Multiply(b) => format!("mul {b}"),
        };
        writeln!(
            f,
            "; d={} tier={} strategy={} tiles={} stride={}",
            self.d(),
            self.tier(),
            self.strategy,
            self.tiles.len(),
            stride
        )?;
        match self.driver {
            Driver::Range => writeln!(f, "range i <- [begin, end)")?,
            Driver::Dynamic { batch_size } => {
                writeln!(f, "dispatch:")?;
                writeln!(f, "  claim i, end <- next += {batch_size}")?;
            }
        }
        writeln!(f, "row:")?;
        for (t, tile) in self.tiles.iter().enumerate() {
            writeln!(f, "  ; tile {t} cols [{},{})", tile.col_begin, tile.col_end)?;
            for inst in &tile.prologue {
                writeln!(f, "  {inst}")?;
            }
            writeln!(f, "nnz{t}:")?;
            writeln!(f, "  test idx < end ; else nnz{t}.end")?;
            for inst in &tile.body {
                writeln!(f, "  {inst}")?;
            }
            writeln!(f, "  jmp nnz{t}")?;
            writeln!(f, "nnz{t}.end:")?;
            for inst in &tile.epilogue {
                writeln!(f, "  {inst}")?;
            }
        }
        writeln!(f, "  next row")
    }
}
