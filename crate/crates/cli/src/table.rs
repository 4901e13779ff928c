//! CSV input and output with fixed-precision number formatting.

use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::error::{CliError, CliResult};

/// Formats `v` with `digits` significant digits in the shortest of plain or
/// exponent notation, without trailing zeros. With 17 digits every finite
/// double parses back to the same value.
pub fn format_sig(v: f64, digits: usize) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "NaN".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", digits.max(1) - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let all: String = mantissa.chars().filter(|c| *c != '.').collect();
    let sig = all.trim_end_matches('0');
    let sig = if sig.is_empty() { "0" } else { sig };
    if exp < -5 || exp >= digits as i32 {
        let (head, tail) = sig.split_at(1);
        return if tail.is_empty() {
            format!("{sign}{head}e{exp}")
        } else {
            format!("{sign}{head}.{tail}e{exp}")
        };
    }
    if exp < 0 {
        let zeros = "0".repeat((-exp - 1) as usize);
        return format!("{sign}0.{zeros}{sig}");
    }
    let int_len = exp as usize + 1;
    if sig.len() <= int_len {
        format!("{sign}{sig}{}", "0".repeat(int_len - sig.len()))
    } else {
        format!("{sign}{}.{}", &sig[..int_len], &sig[int_len..])
    }
}

/// Value-exact CSV field.
pub fn field(v: f64) -> String {
    format_sig(v, 17)
}

/// Reads observations from a CSV file with a header row. Columns named
/// `y_*` are used when present, otherwise every column except `t`. An empty
/// file yields no observations.
pub fn read_observations(path: &Path, obs_dim: usize) -> CliResult<Vec<DVector<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?.clone();
    let y_cols: Vec<usize> = headers.iter().enumerate().filter(|(_, h)| h.starts_with("y_")).map(|(i, _)| i).collect();
    let cols: Vec<usize> = if y_cols.is_empty() {
        headers.iter().enumerate().filter(|(_, h)| *h != "t").map(|(i, _)| i).collect()
    } else {
        y_cols
    };
    if cols.len() != obs_dim {
        return Err(CliError::Io(format!(
            "{}: found {} observation columns, the model expects {obs_dim}",
            path.display(),
            cols.len()
        )));
    }
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut y = DVector::zeros(obs_dim);
        for (k, &c) in cols.iter().enumerate() {
            let raw = record.get(c).unwrap_or("");
            y[k] = raw.parse().map_err(|_| {
                CliError::Io(format!("{}: data row {}, column '{}': cannot parse '{raw}'", path.display(), row + 1, &headers[c]))
            })?;
        }
        out.push(y);
    }
    Ok(out)
}

/// Header plus rows, written in one go once every row is ready.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let io = |e: csv::Error| CliError::Io(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }
}

/// `prefix_1 .. prefix_n`.
pub fn vector_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// `prefix_i_j` in row-major order.
pub fn matrix_names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).flat_map(|i| (1..=n).map(move |j| format!("{prefix}_{i}_{j}"))).collect()
}

pub fn vector_fields(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|x| field(*x))
}

/// Row-major flattening.
pub fn matrix_fields(m: &nalgebra::DMatrix<f64>) -> Vec<String> {
    m.row_iter().flat_map(|r| r.iter().map(|x| field(*x)).collect::<Vec<_>>()).collect()
}
