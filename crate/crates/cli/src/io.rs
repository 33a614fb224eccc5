//! Data and draw files.
//!
//! Numbers are written with 17 significant digits so every value survives a
//! round trip through text unchanged.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Header `y1,…,yp`, one row per observation.
pub fn write_data(path: &Path, data: &DMatrix<f64>) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    let header: Vec<String> = (1..=data.ncols()).map(|j| format!("y{j}")).collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for row in data.row_iter() {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a numeric CSV with a header row.
pub fn read_data(path: &Path) -> CliResult<DMatrix<f64>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let p = r.headers().map_err(|e| csv_err(path, e))?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != p {
            return Err(CliError::Data(format!("{}: row {} has {} fields, header has {p}", path.display(), i + 1, rec.len())));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Data(format!("{}: row {}, column {}: '{field}' is not a number", path.display(), i + 1, j + 1))
            })?;
            if !v.is_finite() {
                return Err(CliError::Data(format!("{}: row {}, column {} is not finite", path.display(), i + 1, j + 1)));
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 || p == 0 {
        return Err(CliError::Data(format!("{}: no observations", path.display())));
    }
    Ok(DMatrix::from_row_slice(n, p, &values))
}

/// One row of the long-format draws file.
pub struct DrawRow {
    pub chain: usize,
    pub iter: usize,
    pub param: String,
    pub value: f64,
}

pub fn write_draws<I: IntoIterator<Item = DrawRow>>(path: &Path, rows: I) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["chain", "iter", "param", "value"]).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([r.chain.to_string(), r.iter.to_string(), r.param, fmt_f64(r.value)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_draws(path: &Path) -> CliResult<Vec<DrawRow>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["chain", "iter", "param", "value"] {
        return Err(CliError::Data(format!("{}: expected header chain,iter,param,value", path.display())));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = || CliError::Data(format!("{}: malformed draw on line {}", path.display(), i + 2));
        out.push(DrawRow {
            chain: rec[0].parse().map_err(|_| bad())?,
            iter: rec[1].parse().map_err(|_| bad())?,
            param: rec[2].to_string(),
            value: rec[3].parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn read_json_value(path: &Path) -> CliResult<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
