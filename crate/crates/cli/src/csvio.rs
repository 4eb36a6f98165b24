//! CSV emission and ingestion. Data files carry a mandatory header row, are
//! UTF-8, newline-terminated, and format floats at a configurable number of
//! significant digits (17 = shortest round-trippable form, the default).

use crate::error::CliError;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Float formatter pinned to a significant-digit budget.
#[derive(Debug, Clone, Copy)]
pub struct FloatFmt {
    precision: usize,
}

impl FloatFmt {
    pub fn new(precision: usize) -> Self {
        Self {
            precision: precision.clamp(1, 17),
        }
    }

    pub fn fmt(&self, x: f64) -> String {
        if !x.is_finite() {
            return if x.is_nan() {
                "nan".into()
            } else if x > 0.0 {
                "inf".into()
            } else {
                "-inf".into()
            };
        }
        if self.precision >= 17 {
            // Rust's shortest round-trip formatting.
            format!("{x}")
        } else {
            format!("{:.*e}", self.precision - 1, x)
        }
    }

    /// Formats an optional value; `None` becomes an empty cell.
    pub fn fmt_opt(&self, x: Option<f64>) -> String {
        x.map(|v| self.fmt(v)).unwrap_or_default()
    }
}

/// Writes a CSV file: header first, one line per row, `\n`-terminated.
pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len(), "row width matches header");
        let _ = writeln!(text, "{}", row.join(","));
    }
    fs::write(path, text)?;
    Ok(())
}

/// A parsed CSV: column names plus float cells (empty cells are `None`).
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl CsvTable {
    /// Index of a named column.
    pub fn column(&self, name: &str) -> Result<usize, CliError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Parse(format!("missing required column `{name}`")))
    }

    /// All values of one column, masked cells skipped, paired with the
    /// corresponding values of the `x` column.
    pub fn series(&self, x: usize, y: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter_map(|row| match (row[x], row[y]) {
                (Some(a), Some(b)) => Some((a, b)),
                _ => None,
            })
            .collect()
    }
}

/// Reads a CSV of floats produced by this tool (or matching its schemas).
pub fn read_csv(path: &Path) -> Result<CsvTable, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .filter(|h| !h.trim().is_empty())
        .ok_or_else(|| CliError::Parse(format!("{}: empty CSV", path.display())))?;
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(columns.len());
        for cell in line.split(',') {
            let cell = cell.trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                let value = cell.parse::<f64>().map_err(|_| {
                    CliError::Parse(format!(
                        "{}: line {}: `{cell}` is not a number",
                        path.display(),
                        lineno + 2
                    ))
                })?;
                row.push(Some(value));
            }
        }
        if row.len() != columns.len() {
            return Err(CliError::Parse(format!(
                "{}: line {}: {} cells for {} columns",
                path.display(),
                lineno + 2,
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(CsvTable { columns, rows })
}
