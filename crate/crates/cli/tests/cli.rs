use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spmm_jit::matrix::write_matrix_market;
use spmm_jit::{build_kernel, counter_model, random_dense, CsrMatrix, SimdTier, Strategy};
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spmm-jit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_mtx(dir: &Path, name: &str, a: &CsrMatrix) -> PathBuf {
    let path = dir.join(name);
    write_matrix_market(a, std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn json(out: &Output) -> Vec<Value> {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str::<Value>(&text)
        .unwrap_or_else(|e| panic!("{e}: {text}\nstderr: {}", String::from_utf8_lossy(&out.stderr)))
        .as_array()
        .unwrap()
        .clone()
}

fn sample() -> CsrMatrix {
    CsrMatrix::from_triplets(
        6,
        5,
        &[(0, 0, 1.5), (0, 3, -2.0), (1, 1, 0.25), (3, 0, 4.0), (3, 2, 1.0), (3, 4, -0.5), (5, 4, 3.0)],
    )
    .unwrap()
}

#[test]
fn identity_verifies_exactly() {
    let dir = TempDir::new().unwrap();
    let id3 = write_mtx(dir.path(), "id3.mtx", &CsrMatrix::identity(3));
    let out = run(&[
        "--matrix",
        id3.to_str().unwrap(),
        "--cols",
        "16",
        "--strategy",
        "row",
        "--backend",
        "interp",
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let rows = json(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["max_rel_err"], 0.0);
    assert_eq!(rows[0]["verified"], true);
    assert_eq!(rows[0]["m"], 3);
    assert_eq!(rows[0]["nnz"], 3);
    assert_eq!(rows[0]["y_checksum"].as_str().unwrap().len(), 16);
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let out = run(&["--strategy", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("unknown strategy"), "{err}");
    assert!(err.contains("--help"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["--format", "xml"]).status.code(), Some(1));
    assert_eq!(run(&["--matrix", "/nonexistent/m.mtx"]).status.code(), Some(1));
    assert_eq!(run(&["--cols", "0"]).status.code(), Some(1));
    assert_eq!(run(&["--tier", "v1024"]).status.code(), Some(1));
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--strategy"));
}

#[test]
fn counters_match_the_model() {
    let dir = TempDir::new().unwrap();
    let a = sample();
    let path = write_mtx(dir.path(), "a.mtx", &a);
    for (strategy, tier) in [("row", "v512"), ("nnz", "v256"), ("row-static", "scalar")] {
        let out = run(&[
            "--matrix",
            path.to_str().unwrap(),
            "--cols",
            "45",
            "--strategy",
            strategy,
            "--backend",
            "interp",
            "--tier",
            tier,
            "--threads",
            "3",
            "--batch-size",
            "2",
            "--counters",
        ]);
        assert_eq!(out.status.code(), Some(0));
        let row = &json(&out)[0];
        let tier: SimdTier = tier.parse().unwrap();
        let (split, batch) = match strategy {
            "row" => (Strategy::RowSplit, Some(2)),
            "row-static" => (Strategy::RowSplit, None),
            _ => (Strategy::NnzSplit, None),
        };
        let model = counter_model(&a, &build_kernel(45, tier, split, batch).unwrap(), 3);
        let expected = serde_json::to_value(model).unwrap();
        assert_eq!(row["counters"], expected, "{strategy}");
    }
}

#[test]
fn sweep_runs_the_cross_product() {
    let out = run(&[
        "--rows",
        "300",
        "--avg-nnz",
        "5",
        "--skew",
        "1",
        "--strategy",
        "row,nnz,merge",
        "--cols",
        "16,32",
        "--threads",
        "4",
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = json(&out);
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r["verified"] == true));
    for d in [16, 32] {
        let sums: Vec<&Value> = rows.iter().filter(|r| r["d"] == d).map(|r| &r["y_checksum"]).collect();
        assert_eq!(sums.len(), 3);
        assert!(sums.iter().all(|s| *s == sums[0]));
    }
}

#[test]
fn empty_grid_gives_empty_report() {
    let out = run(&["--strategy", ""]);
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out).is_empty());
    let out = run(&["--cols", "", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 1);
}

#[test]
fn unsupported_tier_cells_are_skipped() {
    let out = bin()
        .env(spmm_jit::plan::MAX_ISA_ENV, "avx2")
        .args(["--rows", "50", "--tier", "v512", "--backend", "native,interp", "--strategy", "row,merge"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = json(&out);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        if r["backend"] == "native" {
            assert_eq!(r["skipped"], "skipped: AVX-512F unavailable");
            assert!(r["y_checksum"].is_null());
        } else {
            assert!(r["skipped"].is_null());
            assert_eq!(r["tier"], "v512");
        }
    }
    // a grid with nothing runnable is an error
    let out = bin().env(spmm_jit::plan::MAX_ISA_ENV, "avx2").args(["--rows", "50", "--tier", "v512"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("AVX-512F unavailable"));
}

#[test]
fn verification_failure_exits_two() {
    // Row 0 cancels exactly under separate rounding of each product, but a
    // fused multiply-add keeps the rounding error of the first product.
    let seed = 7;
    let x = random_dense(2, 16, seed).unwrap();
    let scale = 16384.0f32;
    let (x00, x10) = (x.get(0, 0), x.get(1, 0));
    assert_ne!(f64::from(x00) * f64::from(x10), f64::from(x00 * x10), "pick another seed");
    let a = CsrMatrix::from_triplets(1, 2, &[(0, 0, scale * x10), (0, 1, -scale * x00)]).unwrap();
    let dir = TempDir::new().unwrap();
    let path = write_mtx(dir.path(), "cancel.mtx", &a);
    let out = run(&[
        "--matrix",
        path.to_str().unwrap(),
        "--cols",
        "16",
        "--seed",
        &seed.to_string(),
        "--backend",
        "interp",
        "--verify",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let rows = json(&out);
    assert_eq!(rows[0]["verified"], false);
    assert!(rows[0]["max_rel_err"].as_f64().unwrap() > 1e-5);
}

#[test]
fn runs_are_reproducible() {
    let args = ["--rows", "200", "--skew", "2", "--backend", "interp", "--counters", "--threads", "2"];
    let (a, b) = (json(&run(&args)), json(&run(&args)));
    assert_eq!(a[0]["y_checksum"], b[0]["y_checksum"]);
    assert_eq!(a[0]["counters"], b[0]["counters"]);
    assert_eq!(a[0]["nnz"], b[0]["nnz"]);
}

#[test]
fn csv_report_to_file_and_cache_round_trip() {
    let dir = TempDir::new().unwrap();
    let mtx = write_mtx(dir.path(), "a.mtx", &sample());
    let cache = dir.path().join("a.csr");
    let report = dir.path().join("r.csv");
    let out = run(&[
        "--matrix",
        mtx.to_str().unwrap(),
        "--save-cache",
        cache.to_str().unwrap(),
        "--format",
        "csv",
        "--report",
        report.to_str().unwrap(),
        "--trials",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let mut r = csv::Reader::from_path(&report).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, spmm_jit_cli::CSV_COLUMNS);
    let rec = r.records().next().unwrap().unwrap();
    assert_eq!(&rec[5], "row");
    assert_eq!(rec[11].split(';').count(), 3);

    let from_mtx = json(&run(&["--matrix", mtx.to_str().unwrap(), "--backend", "interp"]));
    let from_cache = json(&run(&["--matrix", cache.to_str().unwrap(), "--backend", "interp"]));
    assert_eq!(from_mtx[0]["y_checksum"], from_cache[0]["y_checksum"]);
}
