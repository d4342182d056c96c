//! Command-line driver: load or synthesize a sparse matrix, run a grid of
//! SpMM configurations and write a JSON or CSV report.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use spmm_jit::matrix::{read_csr_cache, write_csr_cache, CACHE_MAGIC};
use spmm_jit::{
    load_matrix_market, random_dense, run_spmm, synthetic_csr, Backend, CsrMatrix, Error, ExecCounters, RunConfig,
    SimdTier, Strategy, SyntheticSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "spmm-jit", version, about = "Run runtime-specialized SpMM kernels and report timings")]
pub struct Cli {
    /// Matrix Market file or binary CSR cache. Without it a synthetic matrix is generated.
    #[arg(long)]
    pub matrix: Option<PathBuf>,

    /// Synthetic matrix rows.
    #[arg(long, default_value_t = 10_000)]
    pub rows: usize,

    /// Synthetic matrix columns (defaults to --rows).
    #[arg(long)]
    pub sparse_cols: Option<usize>,

    /// Synthetic average nonzeros per row.
    #[arg(long, default_value_t = 16.0)]
    pub avg_nnz: f64,

    /// Synthetic row-length skew; 0 gives uniform rows.
    #[arg(long, default_value_t = 0.0)]
    pub skew: f64,

    /// Dense columns d; a comma list runs a sweep.
    #[arg(long, default_value = "16")]
    pub cols: String,

    /// row (dynamic batches), row-static, nnz or merge; comma list allowed.
    #[arg(long, default_value = "row")]
    pub strategy: String,

    /// Worker threads (defaults to the logical core count).
    #[arg(long)]
    pub threads: Option<usize>,

    /// native or interp; comma list allowed.
    #[arg(long, default_value = "native")]
    pub backend: String,

    /// Widest SIMD tier to use: v512, v256 or scalar.
    #[arg(long)]
    pub tier: Option<SimdTier>,

    /// Rows per claim under dynamic dispatch.
    #[arg(long, default_value_t = spmm_jit::partition::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,

    /// Timed repetitions per cell; the kernel is compiled once
    #[arg(long, default_value_t = 1)]
    pub trials: usize,

    /// Seed for the dense operand and the synthetic matrix.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Compare against the reference product; exit 2 when out of tolerance.
    #[arg(long)]
    pub verify: bool,

    /// Include operation counters (interpreter backend only).
    #[arg(long)]
    pub counters: bool,

    /// Report format
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,

    /// Report destination (defaults to stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,

    /// Also write the loaded matrix as a binary CSR cache.
    #[arg(long)]
    pub save_cache: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Row-split comes in two flavors on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyChoice {
    pub strategy: Strategy,
    pub dynamic: bool,
}

impl StrategyChoice {
    pub fn name(self) -> &'static str {
        match (self.strategy, self.dynamic) {
            (Strategy::RowSplit, true) => "row",
            (Strategy::RowSplit, false) => "row-static",
            (s, _) => s.name(),
        }
    }

    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "row" | "row-dynamic" => Ok(Self { strategy: Strategy::RowSplit, dynamic: true }),
            "row-static" => Ok(Self { strategy: Strategy::RowSplit, dynamic: false }),
            other => other
                .parse::<Strategy>()
                .map(|strategy| Self { strategy, dynamic: false })
                .map_err(|_| format!("unknown strategy {other:?} (expected row, row-static, nnz or merge)")),
        }
    }
}

/// Splits a comma list; an empty string is an empty list.
fn parse_list<T>(flag: &str, s: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse(t).map_err(|e| format!("--{flag}: {e}")))
        .collect()
}

/// One cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub d: usize,
    pub strategy: StrategyChoice,
    pub backend: Backend,
}

pub struct Grid {
    pub cells: Vec<Cell>,
}

impl Cli {
    /// Cross product of the swept flags, in `d`, strategy, backend order.
    pub fn grid(&self) -> Result<Grid, String> {
        let ds = parse_list("cols", &self.cols, |t| match t.parse::<usize>() {
            Ok(0) => Err("d must be at least 1".to_string()),
            Ok(d) => Ok(d),
            Err(e) => Err(format!("{t:?}: {e}")),
        })?;
        let strategies = parse_list("strategy", &self.strategy, StrategyChoice::parse)?;
        let backends = parse_list("backend", &self.backend, |t| t.parse::<Backend>())?;
        let mut cells = Vec::new();
        for &d in &ds {
            for &strategy in &strategies {
                for &backend in &backends {
                    cells.push(Cell { d, strategy, backend });
                }
            }
        }
        Ok(Grid { cells })
    }

    fn check(&self) -> Result<(), String> {
        if self.trials == 0 {
            return Err("--trials must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("--batch-size must be at least 1".into());
        }
        if self.threads == Some(0) {
            return Err("--threads must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub matrix: String,
    pub m: usize,
    pub n: usize,
    pub nnz: usize,
    pub d: usize,
    pub strategy: String,
    pub backend: String,
    pub tier: Option<String>,
    pub threads: usize,
    pub batch_size: usize,
    pub trials: usize,
    pub times_s: Vec<f64>,
    pub mean_s: Option<f64>,
    pub codegen_s: Option<f64>,
    pub codegen_pct: Option<f64>,
    pub gflops: Option<f64>,
    pub counters: Option<ExecCounters>,
    /// 16 hex digits.
    pub y_checksum: Option<String>,
    pub max_rel_err: Option<f64>,
    pub verified: Option<bool>,
    pub skipped: Option<String>,
}

pub const CSV_COLUMNS: [&str; 26] = [
    "matrix",
    "m",
    "n",
    "nnz",
    "d",
    "strategy",
    "backend",
    "tier",
    "threads",
    "batch_size",
    "trials",
    "times_s",
    "mean_s",
    "codegen_s",
    "codegen_pct",
    "gflops",
    "memory_loads",
    "stores",
    "branches",
    "vector_arith",
    "scalar_arith",
    "instructions",
    "y_checksum",
    "max_rel_err",
    "verified",
    "skipped",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ReportRow {
    fn csv_record(&self) -> Vec<String> {
        let c = self.counters;
        let field = |f: fn(&ExecCounters) -> u64| opt(c.as_ref().map(f));
        vec![
            self.matrix.clone(),
            self.m.to_string(),
            self.n.to_string(),
            self.nnz.to_string(),
            self.d.to_string(),
            self.strategy.clone(),
            self.backend.clone(),
            opt(self.tier.as_ref()),
            self.threads.to_string(),
            self.batch_size.to_string(),
            self.trials.to_string(),
            self.times_s.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            opt(self.mean_s),
            opt(self.codegen_s),
            opt(self.codegen_pct),
            opt(self.gflops),
            field(|c| c.memory_loads),
            field(|c| c.stores),
            field(|c| c.branches),
            field(|c| c.vector_arith),
            field(|c| c.scalar_arith),
            field(|c| c.instructions),
            opt(self.y_checksum.as_ref()),
            opt(self.max_rel_err),
            opt(self.verified),
            opt(self.skipped.as_ref()),
        ]
    }
}

pub fn write_json(rows: &[ReportRow], w: impl Write) -> io::Result<()> {
    let mut w = w;
    serde_json::to_writer_pretty(&mut w, rows)?;
    writeln!(w)
}

pub fn write_csv(rows: &[ReportRow], w: impl Write) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in rows {
        out.write_record(r.csv_record())?;
    }
    out.flush()
}

/// Loads a Matrix Market file or, when the file starts with the cache
/// magic, a binary CSR cache.
pub fn load_matrix(path: &Path) -> spmm_jit::Result<CsrMatrix> {
    let mut magic = [0u8; 4];
    let is_cache = File::open(path)?.read_exact(&mut magic).is_ok() && magic == CACHE_MAGIC;
    if is_cache {
        read_csr_cache(io::BufReader::new(File::open(path)?))
    } else {
        load_matrix_market(path)
    }
}

struct Loaded {
    name: String,
    a: CsrMatrix,
}

fn load(cli: &Cli) -> spmm_jit::Result<Loaded> {
    match &cli.matrix {
        Some(path) => Ok(Loaded { name: path.display().to_string(), a: load_matrix(path)? }),
        None => {
            let spec = SyntheticSpec {
                rows: cli.rows,
                cols: cli.sparse_cols.unwrap_or(cli.rows),
                avg_nnz_per_row: cli.avg_nnz,
                skew: cli.skew,
                seed: cli.seed,
            };
            let name = format!(
                "synthetic:rows={},cols={},avg={},skew={},seed={}",
                spec.rows, spec.cols, spec.avg_nnz_per_row, spec.skew, spec.seed
            );
            Ok(Loaded { name, a: synthetic_csr(&spec)? })
        }
    }
}

/// Cells whose backend cannot run on this host are reported, not fatal.
fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::FeatureUnavailable(_) | Error::NativeUnsupported)
}

/// Runs the grid. `Err` carries a message for a fatal error.
pub fn run_grid(cli: &Cli, grid: &Grid) -> Result<Vec<ReportRow>, String> {
    if grid.cells.is_empty() {
        return Ok(Vec::new());
    }
    let Loaded { name, a } = load(cli).map_err(|e| e.to_string())?;
    if let Some(path) = &cli.save_cache {
        let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        write_csr_cache(&a, BufWriter::new(f)).map_err(|e| e.to_string())?;
    }
    let threads = cli.threads.unwrap_or_else(|| RunConfig::default().threads);
    let mut rows = Vec::with_capacity(grid.cells.len());
    let mut operands: Vec<(usize, spmm_jit::DenseMatrix)> = Vec::new();
    for cell in &grid.cells {
        if !operands.iter().any(|(d, _)| *d == cell.d) {
            let x = random_dense(a.cols(), cell.d, cli.seed).map_err(|e| e.to_string())?;
            operands.push((cell.d, x));
        }
        let x = &operands.iter().find(|(d, _)| *d == cell.d).unwrap().1;
        let cfg = RunConfig {
            strategy: cell.strategy.strategy,
            threads,
            backend: cell.backend,
            tier_cap: cli.tier,
            batch_size: cli.batch_size,
            dynamic: cell.strategy.dynamic,
            verify: cli.verify,
            trials: cli.trials,
        };
        let mut row = ReportRow {
            matrix: name.clone(),
            m: a.rows(),
            n: a.cols(),
            nnz: a.nnz(),
            d: cell.d,
            strategy: cell.strategy.name().to_string(),
            backend: cell.backend.to_string(),
            tier: cli.tier.map(|t| t.to_string()),
            threads,
            batch_size: cli.batch_size,
            trials: cli.trials,
            times_s: Vec::new(),
            mean_s: None,
            codegen_s: None,
            codegen_pct: None,
            gflops: None,
            counters: None,
            y_checksum: None,
            max_rel_err: None,
            verified: None,
            skipped: None,
        };
        match run_spmm(&a, x, &cfg) {
            Ok((_, r)) => {
                row.tier = Some(r.tier.to_string());
                row.mean_s = Some(r.mean_s);
                row.codegen_s = Some(r.codegen_s);
                row.codegen_pct = Some(r.codegen_pct);
                row.gflops = Some(r.gflops);
                row.counters = if cli.counters { r.counters } else { None };
                row.y_checksum = Some(format!("{:016x}", r.y_checksum));
                row.max_rel_err = r.max_rel_err;
                row.verified = r.verified();
                row.times_s = r.times_s;
            }
            Err(e) if is_skippable(&e) => row.skipped = Some(format!("skipped: {e}")),
            Err(e) => return Err(format!("d={} {} {}: {e}", cell.d, row.strategy, row.backend)),
        }
        rows.push(row);
    }
    if rows.iter().all(|r| r.skipped.is_some()) {
        return Err(rows[0].skipped.clone().unwrap());
    }
    Ok(rows)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(stdout, "{text}") } else { write!(stderr, "{text}") };
            return code;
        }
    };
    let grid = match cli.check().and_then(|()| cli.grid()) {
        Ok(g) => g,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}\n\nFor more information, try '--help'.");
            return EXIT_USAGE;
        }
    };
    let rows = match run_grid(&cli, &grid) {
        Ok(r) => r,
        Err(msg) => {
            let _ = writeln!(stderr, "error: {msg}");
            return EXIT_USAGE;
        }
    };
    for r in rows.iter().filter(|r| r.skipped.is_some()) {
        let _ = writeln!(stderr, "d={} {} {}: {}", r.d, r.strategy, r.backend, r.skipped.as_ref().unwrap());
    }
    if cli.counters && rows.iter().any(|r| r.backend == "native" && r.skipped.is_none()) {
        let _ = writeln!(stderr, "note: counters are only collected by the interp backend");
    }
    let written = match &cli.report {
        Some(path) => File::create(path).and_then(|f| write_report(&cli, &rows, BufWriter::new(f))),
        None => write_report(&cli, &rows, &mut *stdout),
    };
    if let Err(e) = written {
        let _ = writeln!(stderr, "error: writing report: {e}");
        return EXIT_USAGE;
    }
    if rows.iter().any(|r| r.verified == Some(false)) {
        let _ = writeln!(stderr, "error: verification failed");
        return EXIT_VERIFY;
    }
    EXIT_OK
}

fn write_report(cli: &Cli, rows: &[ReportRow], w: impl Write) -> io::Result<()> {
    match cli.format {
        Format::Json => write_json(rows, w),
        Format::Csv => write_csv(rows, w),
    }
}
