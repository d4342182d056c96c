use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::CsrMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Real,
    Integer,
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
}

/// Loads a coordinate-format Matrix Market file into canonical CSR.
pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<CsrMatrix> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_matrix_market(BufReader::new(file), path)
}

/// Parses Matrix Market text. `origin` only labels parse errors.
///
/// Supports `coordinate` matrices with `real`, `integer` or `pattern` fields
/// and `general` or `symmetric` symmetry. Symmetric files are expanded to
/// both triangles, pattern entries become `1.0`, and duplicates are summed.
pub fn read_matrix_market<R: BufRead>(reader: R, origin: &Path) -> Result<CsrMatrix> {
    let err = |line: usize, message: String| Error::Parse { path: origin.to_path_buf(), line, message };

    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (lineno, banner) = match lines.next() {
        Some((n, l)) => (n, l?),
        None => return Err(err(1, "empty file".into())),
    };
    let (field, symmetry) = parse_banner(&banner).map_err(|e| match e {
        Error::UnsupportedFormat(_) => e,
        _ => err(lineno, "malformed %%MatrixMarket header".into()),
    })?;

    let mut size: Option<(usize, usize, usize)> = None;
    let mut entries: Vec<(usize, usize, f32)> = Vec::new();
    let mut seen = 0usize;
    for (lineno, line) in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let mut toks = t.split_whitespace();
        let Some((m, n, nnz)) = size else {
            let mut next = || -> Result<usize> {
                let tok = toks.next().ok_or_else(|| err(lineno, "incomplete size line".into()))?;
                tok.parse().map_err(|_| err(lineno, format!("invalid size value {tok:?}")))
            };
            let dims = (next()?, next()?, next()?);
            if toks.next().is_some() {
                return Err(err(lineno, "trailing tokens on size line".into()));
            }
            let cap = if symmetry == Symmetry::Symmetric { dims.2 * 2 } else { dims.2 };
            entries.reserve(cap);
            size = Some(dims);
            continue;
        };
        if seen == nnz {
            return Err(err(lineno, format!("more than the declared {nnz} entries")));
        }
        let mut index = |what: &str, bound: usize| -> Result<usize> {
            let tok = toks.next().ok_or_else(|| err(lineno, format!("missing {what} index")))?;
            let v: usize = tok.parse().map_err(|_| err(lineno, format!("invalid {what} index {tok:?}")))?;
            if v == 0 || v > bound {
                return Err(err(lineno, format!("{what} index {v} outside 1..={bound}")));
            }
            Ok(v - 1)
        };
        let i = index("row", m)?;
        let j = index("column", n)?;
        let v = match field {
            Field::Pattern => 1.0,
            Field::Real | Field::Integer => {
                let tok = toks.next().ok_or_else(|| err(lineno, "missing value".into()))?;
                let parsed = if field == Field::Real {
                    tok.parse::<f32>().ok()
                } else {
                    tok.parse::<i64>().ok().map(|v| v as f32)
                };
                parsed.ok_or_else(|| err(lineno, format!("invalid value {tok:?}")))?
            }
        };
        if toks.next().is_some() {
            return Err(err(lineno, "trailing tokens on entry line".into()));
        }
        entries.push((i, j, v));
        if symmetry == Symmetry::Symmetric && i != j {
            entries.push((j, i, v));
        }
        seen += 1;
    }

    let Some((m, n, nnz)) = size else {
        return Err(err(lineno, "missing size line".into()));
    };
    if seen != nnz {
        return Err(err(lineno, format!("declared {nnz} entries but found {seen}")));
    }
    CsrMatrix::from_triplets(m, n, &entries)
}

fn parse_banner(banner: &str) -> Result<(Field, Symmetry)> {
    let toks: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    if toks.len() != 5 || toks[0] != "%%matrixmarket" {
        return Err(Error::Parse { path: Default::default(), line: 1, message: String::new() });
    }
    if toks[1] != "matrix" {
        return Err(Error::UnsupportedFormat(format!("object {:?}", toks[1])));
    }
    if toks[2] != "coordinate" {
        return Err(Error::UnsupportedFormat(format!("format {:?} (only coordinate)", toks[2])));
    }
    let field = match toks[3].as_str() {
        "real" | "double" => Field::Real,
        "integer" => Field::Integer,
        "pattern" => Field::Pattern,
        other => return Err(Error::UnsupportedFormat(format!("field {other:?}"))),
    };
    let symmetry = match toks[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        other => return Err(Error::UnsupportedFormat(format!("symmetry {other:?}"))),
    };
    Ok((field, symmetry))
}

/// Writes `a` as a `coordinate real general` file, one entry per nonzero.
pub fn write_matrix_market<W: Write>(a: &CsrMatrix, mut w: W) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.rows(), a.cols(), a.nnz())?;
    for (i, j, v) in a.triplets() {
        // {:?} on f32 prints the shortest string that parses back exactly
        writeln!(w, "{} {} {:?}", i + 1, j + 1, v)?;
    }
    Ok(())
}
