//! Shared output helpers: fixed-precision number formatting, atomic file
//! replacement and a thin CSV reader.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Formats `x` like C's `%.9g`: nine significant digits, trailing zeros
/// trimmed, scientific notation outside `[1e-4, 1e9)`.
pub fn fmt_sig9(x: f64) -> String {
    fmt_sig(x, 9)
}

pub fn fmt_sig(x: f64, digits: usize) -> String {
    assert!(digits >= 1);
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Round once in scientific form so the exponent reflects the rounded value.
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Writes `bytes` to a temporary sibling and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Reads a headed CSV file, checks the header against `expected` and returns
/// the data rows as owned strings.
pub fn read_csv_rows(path: &Path, expected: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::MissingFile(path.to_path_buf())
            }
            _ => Error::csv(path, e),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().map(String::as_str).ne(expected.iter().copied()) {
        return Err(Error::csv(
            path,
            format!("header is `{}`, expected `{}`", header.join(","), expected.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        rows.push(record.iter().map(str::to_string).collect());
    }
    Ok(rows)
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::csv(path, format!("cannot parse {what} from `{field}`")))
}

/// `x` rounded to nine significant digits, for JSON output.
pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().unwrap_or(x)
}

/// Melts headed CSV files into `source,key,variable,value` rows. The first
/// column of each file is the key, `source` is the file stem.
pub fn long_format_report(paths: &[PathBuf]) -> Result<String> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::InvalidParameter(format!("cannot format report: {e}"));
    out.write_record(["source", "key", "variable", "value"])
        .map_err(write_err)?;
    for path in paths {
        let source = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    Error::MissingFile(path.to_path_buf())
                }
                _ => Error::csv(path, e),
            })?;
        let header = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if header.len() < 2 {
            return Err(Error::csv(path, "need a key column and at least one value column"));
        }
        for record in reader.records() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            for (variable, value) in header.iter().zip(record.iter()).skip(1) {
                out.write_record([source.as_str(), &record[0], variable, value])
                    .map_err(write_err)?;
            }
        }
    }
    let bytes = out.into_inner().map_err(|e| Error::InvalidParameter(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv input was UTF-8"))
}
