//! Tab-separated tables with a header row, used for every tabular artifact.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Missing-value marker.
pub const NA: &str = "NA";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::NotFound(format!("column `{name}`")))
    }

    /// Index of every column by name.
    pub fn index(&self) -> HashMap<&str, usize> {
        self.columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect()
    }

    /// Parses a numeric cell; `NA` and empty cells are `None`.
    pub fn number(&self, row: usize, col: usize) -> Result<Option<f64>> {
        let cell = self.rows[row][col].trim();
        if cell.is_empty() || cell == NA {
            return Ok(None);
        }
        cell.parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("row {row}, column `{}`: `{cell}` is not a number", self.columns[col])))
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(out);
        let fmt_err = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(&self.columns).map_err(fmt_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(fmt_err)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .quoting(false)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let columns = r
            .headers()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            rows.push(rec.iter().map(str::to_string).collect());
        }
        Ok(Table { columns, rows })
    }
}

/// Formats an optional number, `NA` when absent.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_missing_values() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["1.5".into(), fmt_opt(None)]);
        let f = tempfile::NamedTempFile::new().unwrap();
        t.write(std::fs::File::create(f.path()).unwrap()).unwrap();
        let back = Table::read(f.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.number(0, 0).unwrap(), Some(1.5));
        assert_eq!(back.number(0, 1).unwrap(), None);
        assert!(back.column("zz").is_err());
    }
}
