//! Delimiter-separated result tables.
//!
//! Every file starts with a `# format_version=N` comment line followed by a
//! header row. Floats are written in Rust's shortest round-trip form, so a
//! parsed table reproduces the written values exactly.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Format(format!("table has no column {name:?}")))
    }

    pub fn get(&self, row: usize, name: &str) -> Result<&str> {
        let c = self.column(name)?;
        self.rows
            .get(row)
            .map(|r| r[c].as_str())
            .ok_or_else(|| Error::Format(format!("table has no row {row}")))
    }

    pub fn get_f64(&self, row: usize, name: &str) -> Result<f64> {
        let s = self.get(row, name)?;
        s.parse()
            .map_err(|_| Error::Format(format!("column {name:?} row {row}: {s:?} is not a number")))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let body = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        let body = String::from_utf8(body).map_err(|e| Error::Format(e.to_string()))?;
        Ok(format!("# format_version={TABLE_FORMAT_VERSION}\n{body}"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let version: u32 = first
            .trim()
            .strip_prefix("# format_version=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("table is missing its format_version line".into()))?;
        if version != TABLE_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: TABLE_FORMAT_VERSION,
            });
        }
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let columns: Vec<String> = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(String::from)
            .collect();
        let mut table = Table::new(columns);
        for rec in r.records() {
            table.push(rec.map_err(csv_err)?.iter().map(String::from).collect())?;
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Cell text for any displayable value.
pub fn cell(v: impl Display) -> String {
    v.to_string()
}

/// Cell text for an optional value; `None` becomes an empty cell.
pub fn opt_cell<T: Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
